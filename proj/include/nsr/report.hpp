#pragma once

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "nsr/attacks.hpp"
#include "nsr/data.hpp"
#include "nsr/errors.hpp"
#include "nsr/metrics.hpp"
#include "nsr/model.hpp"
#include "nsr/parallel.hpp"
#include "nsr/svg.hpp"

namespace nsr {

/// Noise levels of the waveform figure, used as the default evaluation grid.
inline const std::vector<double> kDefaultEpsGrid = {0, 0.01, 0.02, 0.03, 0.05, 0.1, 0.2, 0.3};

struct PgdSpec {
  int steps = 100;
  std::optional<double> step_size;
  bool random_start = true;
  AttackLoss loss = AttackLoss::ce;
};

struct SpsaSpec {
  int iterations = 100;
  double delta = 0.01;
  double lr = 0.01;
  int pairs = 1024;
};

/// An attack with everything but its radius fixed.
struct AttackSpec {
  std::string id;  // e.g. "pgd100", "pgd20", "spsa"
  std::variant<PgdSpec, SpsaSpec> kind;
  double lo = 0.0, hi = 1.0;

  nlohmann::json to_json() const {
    nlohmann::json j{{"id", id}, {"lo", lo}, {"hi", hi}};
    if (const auto* p = std::get_if<PgdSpec>(&kind)) {
      j["method"] = "pgd";
      j["steps"] = p->steps;
      j["step_size"] = p->step_size ? nlohmann::json(*p->step_size) : nlohmann::json(nullptr);
      j["random_start"] = p->random_start;
      j["loss"] = attack_loss_name(p->loss);
    } else {
      const auto& s = std::get<SpsaSpec>(kind);
      j["method"] = "spsa";
      j.update({{"iterations", s.iterations}, {"delta", s.delta}, {"lr", s.lr}, {"pairs", s.pairs}});
    }
    return j;
  }

  std::string digest() const { return digest_bytes(to_json().dump()); }
};

inline AttackSpec pgd_spec(int steps) {
  PgdSpec p;
  p.steps = steps;
  return {"pgd" + std::to_string(steps), p};
}
inline AttackSpec spsa_spec(const SpsaSpec& s = {}) { return {"spsa", s}; }

template <typename T>
Tensor<T> run_attack(const Model<T>& m, const Tensor<T>& x, const std::vector<int>& y, const AttackSpec& spec,
                     double eps, const RandStream& rng) {
  if (const auto* p = std::get_if<PgdSpec>(&spec.kind)) {
    PgdConfig cfg;
    cfg.eps = eps;
    cfg.steps = p->steps;
    cfg.step_size = p->step_size;
    cfg.random_start = p->random_start;
    cfg.loss = p->loss;
    cfg.lo = spec.lo;
    cfg.hi = spec.hi;
    return pgd_attack(m, x, y, cfg, rng);
  }
  const auto& s = std::get<SpsaSpec>(spec.kind);
  SpsaConfig cfg;
  cfg.eps = eps;
  cfg.iterations = s.iterations;
  cfg.delta = s.delta;
  cfg.lr = s.lr;
  cfg.pairs = s.pairs;
  cfg.lo = spec.lo;
  cfg.hi = spec.hi;
  return spsa_attack(m, x, y, cfg, rng);
}

struct ReportRow {
  double eps = 0;
  double acc = 0;
  double prec = 0;
  std::size_t n = 0;
};

struct RobustnessReport {
  std::string arch;     // "mlp" / "cnn"
  std::string method;   // "ce", "loss2", "adv0.1", ...
  std::string attack;   // attack id
  std::string config_digest;
  std::uint64_t seed = 0;
  std::string timestamp;
  std::vector<ReportRow> rows;

  std::string model_id() const { return arch + "_" + method; }
  std::string stem() const { return arch + "_" + method + "_" + attack; }

  void validate() const {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i && !(rows[i].eps > rows[i - 1].eps)) throw ArgumentError("report eps values must strictly increase");
      if (rows[i].acc < 0 || rows[i].acc > 1 || rows[i].prec < 0 || rows[i].prec > 1)
        throw ArgumentError("report metrics must lie in [0, 1]");
    }
  }

  const ReportRow* at(double eps) const {
    for (const auto& r : rows)
      if (std::abs(r.eps - eps) < 1e-12) return &r;
    return nullptr;
  }
};

struct CurveOptions {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::size_t chunk = 64;  // fixed chunking keeps results independent of thread count
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Predictions on the attacked set at one radius. Chunk c uses rng.derive(c).
template <typename T>
std::vector<int> attacked_predictions(const Model<T>& m, const AttackSpec& spec, double eps,
                                      const HeartbeatSet& set, const RandStream& rng,
                                      const CurveOptions& opt) {
  std::vector<int> pred(set.size());
  if (eps == 0) return predict(m, set);
  const std::size_t chunks = (set.size() + opt.chunk - 1) / opt.chunk;
  parallel_for(chunks, opt.threads, [&](std::size_t c) {
    std::vector<std::size_t> rows;
    for (std::size_t r = c * opt.chunk; r < std::min(set.size(), (c + 1) * opt.chunk); ++r) rows.push_back(r);
    const auto b = make_batch<T>(set, rows);
    const auto adv = run_attack(m, b.x, b.y, spec, eps, rng.derive(c));
    const auto p = argmax_rows(predict_logits(m, adv));
    std::copy(p.begin(), p.end(), pred.begin() + static_cast<std::ptrdiff_t>(c * opt.chunk));
  });
  return pred;
}

/// ACC/PREC at each radius; the ε = 0 row is the clean evaluation.
template <typename T>
RobustnessReport robustness_curve(const Model<T>& m, const AttackSpec& spec, const std::vector<double>& eps_list,
                                  const HeartbeatSet& set, const CurveOptions& opt = {}) {
  if (eps_list.empty() || eps_list.front() != 0.0)
    throw ArgumentError("eps list must start with the clean anchor 0");
  for (std::size_t i = 1; i < eps_list.size(); ++i)
    if (!(eps_list[i] > eps_list[i - 1])) throw ArgumentError("eps list must be strictly increasing");
  if (set.size() == 0) throw ArgumentError("evaluation set is empty");
  RobustnessReport rep;
  rep.attack = spec.id;
  rep.config_digest = spec.digest();
  rep.seed = opt.seed;
  rep.timestamp = utc_timestamp();
  const RandStream root(opt.seed, 0x5eed);
  for (std::size_t i = 0; i < eps_list.size(); ++i) {
    const auto pred = attacked_predictions(m, spec, eps_list[i], set, root.derive(i), opt);
    const auto mt = metrics(pred, set.labels, m.class_count());
    rep.rows.push_back({eps_list[i], mt.acc, mt.prec, set.size()});
  }
  return rep;
}

struct AlignmentStats {
  std::vector<double> per_class;      // mean cosine per class (0 when no samples)
  std::vector<std::size_t> counts;    // samples contributing per class
  double overall = 0;
  std::size_t total = 0;
  std::size_t skipped = 0;            // zero-norm x or w
};

inline double cosine(std::span<const double> a, std::span<const double> b, bool& degenerate) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  degenerate = aa == 0 || bb == 0;
  return degenerate ? 0.0 : ab / std::sqrt(aa * bb);
}

/// Mean cosine between w_y and x over correctly classified samples.
template <typename T>
AlignmentStats alignment_diagnostic(const Model<T>& m, const HeartbeatSet& set, std::size_t chunk = 512) {
  AlignmentStats st;
  const std::size_t k = m.class_count();
  st.per_class.assign(k, 0.0);
  st.counts.assign(k, 0);
  double sum = 0;
  std::vector<std::size_t> rows;
  std::vector<double> wd, xd;
  for (std::size_t start = 0; start < set.size(); start += chunk) {
    rows.clear();
    for (std::size_t r = start; r < std::min(set.size(), start + chunk); ++r) rows.push_back(r);
    const auto b = make_batch<T>(set, rows);
    const auto fwd = forward(m, b.x, false);
    const auto pred = argmax_rows(fwd.logits);
    std::vector<int> cls(rows.size(), -1);
    for (std::size_t s = 0; s < rows.size(); ++s)
      if (pred[s] == b.y[s]) cls[s] = b.y[s];
    const auto eff = effective_rows(m, fwd.masks, cls);
    for (std::size_t s = 0; s < rows.size(); ++s) {
      if (cls[s] < 0) continue;
      auto w = eff.w.row(s);
      auto x = b.x.row(s);
      wd.assign(w.begin(), w.end());
      xd.assign(x.begin(), x.end());
      bool degenerate = false;
      const double c = cosine(wd, xd, degenerate);
      if (degenerate) {
        ++st.skipped;
        continue;
      }
      st.per_class[cls[s]] += c;
      ++st.counts[cls[s]];
      sum += c;
      ++st.total;
    }
  }
  for (std::size_t c = 0; c < k; ++c)
    if (st.counts[c]) st.per_class[c] /= static_cast<double>(st.counts[c]);
  st.overall = st.total ? sum / static_cast<double>(st.total) : 0.0;
  return st;
}

/// A clean heartbeat and its adversarial versions across a radius grid.
struct WaveformPanel {
  std::string arch, method, attack;
  int label = 0;
  std::vector<double> eps;                    // eps[0] == 0 is the clean trace
  std::vector<std::vector<double>> signals;

  std::string stem() const { return arch + "_" + method + "_" + attack; }
};

template <typename T>
WaveformPanel waveform_panel(const Model<T>& m, const AttackSpec& spec, const std::vector<double>& eps_list,
                             std::span<const float> beat, int label, std::uint64_t seed) {
  WaveformPanel p;
  p.attack = spec.id;
  p.label = label;
  const Tensor<T> x({1, beat.size()}, std::vector<T>(beat.begin(), beat.end()));
  const RandStream root(seed, 0xfeed);
  for (std::size_t i = 0; i < eps_list.size(); ++i) {
    const Tensor<T> adv = eps_list[i] == 0 ? x : run_attack(m, x, {label}, spec, eps_list[i], root.derive(i));
    p.eps.push_back(eps_list[i]);
    p.signals.emplace_back(adv.data().begin(), adv.data().end());
  }
  return p;
}

namespace detail {

inline std::string num(double v) {
  char buf[40];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& s, const std::string& context) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw FormatError("bad number '" + s + "' in " + context);
  return v;
}

}  // namespace detail

inline nlohmann::json report_metadata(const RobustnessReport& r) {
  return {{"arch", r.arch},   {"method", r.method}, {"attack", r.attack},
          {"config_digest", r.config_digest}, {"seed", r.seed}, {"timestamp", r.timestamp}};
}

inline std::string report_csv(const RobustnessReport& r) {
  std::string s = "eps,ACC,PREC,n\n";
  for (const auto& row : r.rows)
    s += detail::num(row.eps) + "," + detail::num(row.acc) + "," + detail::num(row.prec) + "," +
         std::to_string(row.n) + "\n";
  return s;
}

/// Writes {stem}.csv plus a {stem}.json sidecar with seeds and digests.
inline std::vector<std::filesystem::path> write_report(const RobustnessReport& r, const std::filesystem::path& dir) {
  r.validate();
  std::filesystem::create_directories(dir);
  const auto csv = dir / (r.stem() + ".csv");
  const auto meta = dir / (r.stem() + ".json");
  detail::write_text(csv, report_csv(r));
  detail::write_text(meta, report_metadata(r).dump(2) + "\n");
  return {csv, meta};
}

/// Reads a report CSV; arch/method/attack come from the sidecar or the file name.
inline RobustnessReport read_report(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw IoError("cannot read report " + csv.string());
  RobustnessReport r;
  const auto parts = detail::split(csv.stem().string(), '_');
  if (parts.size() == 3) {
    r.arch = parts[0];
    r.method = parts[1];
    r.attack = parts[2];
  }
  auto meta = csv;
  meta.replace_extension(".json");
  if (std::filesystem::exists(meta)) {
    std::ifstream mi(meta);
    try {
      const auto j = nlohmann::json::parse(mi);
      r.arch = j.value("arch", r.arch);
      r.method = j.value("method", r.method);
      r.attack = j.value("attack", r.attack);
      r.config_digest = j.value("config_digest", "");
      r.seed = j.value("seed", std::uint64_t{0});
      r.timestamp = j.value("timestamp", "");
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("malformed report metadata " + meta.string() + ": " + e.what());
    }
  }
  if (r.arch.empty() || r.method.empty() || r.attack.empty())
    throw FormatError("report " + csv.string() + " is not named {arch}_{method}_{attack}.csv");
  std::string line;
  if (!std::getline(in, line) || line.rfind("eps,ACC,PREC,n", 0) != 0)
    throw FormatError("report " + csv.string() + " lacks the eps,ACC,PREC,n header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 4) throw FormatError("report row '" + line + "' in " + csv.string());
    r.rows.push_back({detail::parse_double(f[0], csv.string()), detail::parse_double(f[1], csv.string()),
                      detail::parse_double(f[2], csv.string()),
                      static_cast<std::size_t>(detail::parse_double(f[3], csv.string()))});
  }
  r.validate();
  return r;
}

inline std::string waveform_csv(const WaveformPanel& p) {
  std::string s = "eps,label,values\n";
  for (std::size_t i = 0; i < p.eps.size(); ++i) {
    s += detail::num(p.eps[i]) + "," + std::to_string(p.label);
    for (double v : p.signals[i]) s += "," + detail::num(v);
    s += "\n";
  }
  return s;
}

inline WaveformPanel read_waveform_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  WaveformPanel p;
  auto stem = path.stem().string();
  const std::string suffix = "_waveforms";
  if (stem.size() > suffix.size() && stem.compare(stem.size() - suffix.size(), suffix.size(), suffix) == 0)
    stem.resize(stem.size() - suffix.size());
  const auto parts = detail::split(stem, '_');
  if (parts.size() != 3) throw FormatError("waveform file " + path.string() + " has an unexpected name");
  p.arch = parts[0];
  p.method = parts[1];
  p.attack = parts[2];
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() < 3) throw FormatError("waveform row too short in " + path.string());
    p.eps.push_back(detail::parse_double(f[0], path.string()));
    p.label = static_cast<int>(detail::parse_double(f[1], path.string()));
    std::vector<double> sig;
    for (std::size_t i = 2; i < f.size(); ++i) sig.push_back(detail::parse_double(f[i], path.string()));
    p.signals.push_back(std::move(sig));
  }
  return p;
}

inline std::string waveform_svg(const WaveformPanel& p) {
  svg::ChartStyle st;
  st.width = 420;
  st.height = 220;
  st.margin_right = 20;
  st.margin_left = 50;
  st.markers = false;
  const std::size_t cols = 2;
  const std::size_t rows = (p.eps.size() + cols - 1) / cols;
  std::string body;
  for (std::size_t i = 0; i < p.eps.size(); ++i) {
    svg::Series s;
    s.name = "beat";
    for (std::size_t j = 0; j < p.signals[i].size(); ++j) {
      s.x.push_back(static_cast<double>(j));
      s.y.push_back(p.signals[i][j]);
    }
    const std::string title = p.eps[i] == 0 ? "clean ECG" : "ECG on noise level " + svg::fmt(p.eps[i]);
    body += svg::chart_body(title, "sample", "amplitude", {s}, 0.0, 1.0, st,
                            static_cast<double>(i % cols) * st.width, static_cast<double>(i / cols) * st.height,
                            false);
  }
  return svg::document(st.width * cols, st.height * static_cast<double>(rows), body);
}

/**
 * Writes, under `dir`:
 *  - {arch}_{method}_{attack}.csv / .json / .svg for each report,
 *  - {arch}_{attack}_comparison.csv merging methods (eps, then ACC_m, PREC_m per method),
 *  - {arch}_{attack}_ACC.svg and _PREC.svg with one series per method,
 *  - {stem}_waveforms.svg for each waveform panel.
 * Returns the written paths; an empty input writes nothing.
 */
inline std::vector<std::filesystem::path> emit_report(const std::vector<RobustnessReport>& reports,
                                                      const std::filesystem::path& dir,
                                                      const std::vector<WaveformPanel>& panels = {}) {
  std::vector<std::filesystem::path> written;
  if (reports.empty() && panels.empty()) return written;
  std::filesystem::create_directories(dir);
  std::vector<std::pair<std::string, std::string>> group_order;
  std::map<std::pair<std::string, std::string>, std::vector<const RobustnessReport*>> groups;
  for (const auto& r : reports) {
    for (auto& p : write_report(r, dir)) written.push_back(p);
    std::vector<svg::Series> series(2);
    series[0].name = "ACC";
    series[1].name = "PREC";
    for (const auto& row : r.rows) {
      series[0].x.push_back(row.eps);
      series[0].y.push_back(row.acc);
      series[1].x.push_back(row.eps);
      series[1].y.push_back(row.prec);
    }
    const auto svg_path = dir / (r.stem() + ".svg");
    detail::write_text(svg_path, svg::line_chart(r.arch + " " + r.method + " under " + r.attack, "noise level",
                                                 "metric", series, 0.0, 1.0));
    written.push_back(svg_path);
    const auto key = std::make_pair(r.arch, r.attack);
    if (!groups.count(key)) group_order.push_back(key);
    groups[key].push_back(&r);
  }
  for (const auto& key : group_order) {
    const auto& members = groups[key];
    std::vector<double> eps;
    for (const auto* r : members)
      for (const auto& row : r->rows)
        if (std::find(eps.begin(), eps.end(), row.eps) == eps.end()) eps.push_back(row.eps);
    std::sort(eps.begin(), eps.end());
    std::string csv = "eps";
    for (const auto* r : members) csv += ",ACC_" + r->method + ",PREC_" + r->method;
    csv += "\n";
    for (double e : eps) {
      csv += detail::num(e);
      for (const auto* r : members) {
        const auto* row = r->at(e);
        csv += row ? "," + detail::num(row->acc) + "," + detail::num(row->prec) : std::string(",,");
      }
      csv += "\n";
    }
    const auto stem = key.first + "_" + key.second;
    const auto cmp = dir / (stem + "_comparison.csv");
    detail::write_text(cmp, csv);
    written.push_back(cmp);
    for (const bool is_acc : {true, false}) {
      std::vector<svg::Series> series;
      for (const auto* r : members) {
        svg::Series s;
        s.name = r->method;
        for (const auto& row : r->rows) {
          s.x.push_back(row.eps);
          s.y.push_back(is_acc ? row.acc : row.prec);
        }
        series.push_back(std::move(s));
      }
      const std::string metric = is_acc ? "ACC" : "PREC";
      const auto path = dir / (stem + "_" + metric + ".svg");
      detail::write_text(path, svg::line_chart((is_acc ? "Test accuracy" : "Test precision") +
                                                   std::string(" under ") + key.second + " on " + key.first,
                                               "noise level", metric, series, 0.0, 1.0));
      written.push_back(path);
    }
  }
  for (const auto& p : panels) {
    const auto path = dir / (p.stem() + "_waveforms.svg");
    detail::write_text(path, waveform_svg(p));
    written.push_back(path);
  }
  return written;
}

}  // namespace nsr
