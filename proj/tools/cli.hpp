#pragma once

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nsr/checks.hpp"
#include "nsr/config.hpp"
#include "nsr/parallel.hpp"
#include "nsr/pipeline.hpp"

namespace nsr::cli {

namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kValidation = 1, kRuntime = 2 };

/// One line: `error kind=<kind> reason="<message>"`.
inline std::string error_line(const std::string& kind, std::string message) {
  std::replace(message.begin(), message.end(), '\n', ' ');
  std::string quoted;
  for (char c : message) {
    if (c == '"' || c == '\\') quoted += '\\';
    quoted += c;
  }
  return "error kind=" + kind + " reason=\"" + quoted + "\"";
}

inline bool is_validation(const Error& e) {
  return dynamic_cast<const ArgumentError*>(&e) || dynamic_cast<const DimensionError*>(&e) ||
         dynamic_cast<const InputError*>(&e) || dynamic_cast<const IngestionError*>(&e) ||
         dynamic_cast<const PersistenceError*>(&e);
}

struct Context {
  std::ostream& out;
  std::ostream& err;
};

inline std::size_t resolve_threads(std::size_t flag, const RunConfig& cfg) {
  if (flag) return flag;
  if (cfg.threads) return cfg.threads;
  return default_threads();
}

inline RunConfig config_or_default(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

// ---------------------------------------------------------------- prepare

struct PrepareArgs {
  std::string train_csv, test_csv, out;
  std::uint64_t seed = 0;
  double fraction = 0.8;
};

inline int cmd_prepare(const PrepareArgs& a, Context& ctx) {
  const auto train_file = load_heartbeat_csv(a.train_csv);
  const auto test_file = load_heartbeat_csv(a.test_csv);
  auto p = prepare_data(train_file, test_file, a.fraction, a.seed);
  p.manifest["sources"]["train"]["path"] = a.train_csv;
  p.manifest["sources"]["test"]["path"] = a.test_csv;
  write_prepared(p, a.out);
  ctx.out << "prepared train=" << p.train.size() << " val=" << p.val.size() << " test=" << p.test.size()
          << " -> " << a.out << '\n';
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config, out, data;
  std::optional<int> epochs;
  std::optional<std::string> loss;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> arch;
  std::size_t threads = 0;
};

template <typename T>
int train_typed(const RunConfig& cfg, const TrainArgs& a, Context& ctx) {
  const fs::path dir = a.out.empty() ? cfg.out_dir : fs::path(a.out);
  const fs::path data_dir = a.data.empty() ? cfg.prepared_dir : fs::path(a.data);
  if (data_dir.empty()) throw ArgumentError("train needs data.prepared_dir in the config or --data");
  const auto data = load_prepared(data_dir);
  fs::create_directories(dir);
  RunConfig run = cfg;
  run.train.checkpoint_dir = dir;
  const std::size_t threads = resolve_threads(a.threads, cfg);
  auto log = [&](const std::string& line) { ctx.out << line << '\n' << std::flush; };
  auto on_epoch = [&](const EpochRow& r) {
    ctx.out << "epoch " << r.epoch << " loss=" << r.train_loss << " train_acc=" << r.train_acc
            << " val_acc=" << r.val_acc << " val_prec=" << r.val_prec << " gated=" << r.gated_fraction
            << " time=" << r.wall_time_s << "s\n"
            << std::flush;
  };
  auto [res, sweep] = train_with_sweep<T>(run, data, threads, log, on_epoch);
  save_model(res.final_model, dir / "model.json");
  save_model(res.best_model, dir / "best.json");
  res.log.write_csv(dir / "train_log.csv");
  nlohmann::json manifest = {
      {"arch", cfg.arch},
      {"method", cfg.train.loss.method_name()},
      {"config", to_json(cfg)},
      {"config_digest", config_digest(cfg)},
      {"seed", cfg.seed()},
      {"data", {{"dir", data_dir.string()},
                {"train_digest", data.train.digest},
                {"val_digest", data.val.digest},
                {"test_digest", data.test.digest}}},
      {"best_epoch", res.best_epoch},
      {"final", {{"val_acc", res.log.rows.back().val_acc}, {"val_prec", res.log.rows.back().val_prec}}},
      {"timestamp", utc_timestamp()},
  };
  if (!sweep.empty()) {
    nlohmann::json rows = nlohmann::json::array();
    std::size_t best = 0;
    for (std::size_t i = 0; i < sweep.size(); ++i) {
      rows.push_back({{"value", sweep[i].value}, {"val_acc", sweep[i].val_acc},
                      {"robust_val_acc", sweep[i].robust_val_acc}});
      if (sweep[i].robust_val_acc > sweep[best].robust_val_acc) best = i;
    }
    manifest["sweep"] = {{"param", cfg.sweep.param}, {"rows", rows}, {"selected", sweep[best].value}};
  }
  write_json(manifest, dir / "manifest.json");
  ctx.out << "best epoch " << res.best_epoch << "; wrote " << (dir / "model.json").string() << '\n';
  return kOk;
}

inline int cmd_train(const TrainArgs& a, Context& ctx) {
  RunConfig cfg = config_or_default(a.config);
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.arch) cfg.arch = *a.arch;
  if (a.loss) {
    const auto k = loss_kind_from_name(*a.loss);
    if (!k) throw ArgumentError("unknown loss '" + *a.loss + "'");
    cfg.train.loss.kind = *k;
  }
  cfg.validate();
  return cfg.dtype == "f64" ? train_typed<double>(cfg, a, ctx) : train_typed<float>(cfg, a, ctx);
}

// ---------------------------------------------------------------- attack

struct AttackArgs {
  std::string model, method, config, out, data, attack_id, label;
  std::optional<int> steps;
  std::optional<std::size_t> per_class;
  std::optional<int> waveform_row;
  std::size_t threads = 0;
};

inline AttackEntry select_attack(const RunConfig& cfg, const AttackArgs& a) {
  for (const auto& e : cfg.attacks) {
    const bool is_pgd = std::holds_alternative<PgdSpec>(e.spec.kind);
    if ((a.method == "pgd") != is_pgd) continue;
    if (!a.attack_id.empty() && e.spec.id != a.attack_id) continue;
    AttackEntry chosen = e;
    if (a.steps) {
      if (!is_pgd) throw ArgumentError("--steps applies to pgd only");
      std::get<PgdSpec>(chosen.spec.kind).steps = *a.steps;
      chosen.spec.id = "pgd" + std::to_string(*a.steps);
    }
    if (a.per_class) chosen.per_class = *a.per_class;
    return chosen;
  }
  throw ArgumentError("no " + a.method + " attack" + (a.attack_id.empty() ? "" : " with id " + a.attack_id) +
                      " in the config");
}

template <typename T>
int attack_typed(const RunConfig& cfg, const AttackArgs& a, Context& ctx) {
  const auto model = load_model<T>(a.model);
  const AttackEntry entry = select_attack(cfg, a);
  std::string arch = cfg.arch, method = cfg.train.loss.method_name();
  const fs::path sibling = fs::path(a.model).parent_path() / "manifest.json";
  if (fs::exists(sibling)) {
    const auto m = read_json(sibling);
    arch = m.value("arch", arch);
    method = m.value("method", method);
  }
  if (!a.label.empty()) method = a.label;
  fs::path test_path = a.data;
  if (test_path.empty()) {
    if (cfg.prepared_dir.empty()) throw ArgumentError("attack needs --data or data.prepared_dir");
    test_path = cfg.prepared_dir / "test.csv";
  }
  const auto test = load_heartbeat_csv(test_path);
  const auto eval = attack_eval_set(entry, test);
  CurveOptions opt;
  opt.seed = cfg.seed();
  opt.threads = resolve_threads(a.threads, cfg);
  opt.chunk = cfg.eval_chunk;
  auto rep = robustness_curve(model, entry.spec, cfg.eps_grid, eval, opt);
  rep.arch = arch;
  rep.method = method;
  rep.config_digest = digest_bytes(to_json(cfg).dump() + entry.spec.to_json().dump());
  fs::path out = a.out;
  fs::path dir = out.has_extension() ? out.parent_path() : out;
  if (dir.empty()) dir = ".";
  fs::create_directories(dir);
  if (out.has_extension()) {
    detail::write_text(out, report_csv(rep));
    auto meta = report_metadata(rep);
    meta["model"] = a.model;
    meta["eval_rows"] = eval.size();
    auto side = out;
    side.replace_extension(".json");
    write_json(meta, side);
  } else {
    write_report(rep, dir);
    out = dir / (rep.stem() + ".csv");
  }
  if (a.waveform_row) {
    const auto row = static_cast<std::size_t>(*a.waveform_row);
    if (row >= test.size()) throw ArgumentError("--waveform-row beyond the test set");
    auto panel = waveform_panel(model, entry.spec, cfg.eps_grid, test.signals.row(row), test.labels[row], cfg.seed());
    panel.arch = arch;
    panel.method = method;
    detail::write_text(dir / (panel.stem() + "_waveforms.csv"), waveform_csv(panel));
  }
  for (const auto& r : rep.rows)
    ctx.out << "eps=" << r.eps << " ACC=" << r.acc << " PREC=" << r.prec << " n=" << r.n << '\n';
  ctx.out << "wrote " << out.string() << '\n';
  return kOk;
}

inline int cmd_attack(const AttackArgs& a, Context& ctx) {
  const RunConfig cfg = config_or_default(a.config);
  if (a.method != "pgd" && a.method != "spsa") throw ArgumentError("--method must be pgd or spsa");
  return cfg.dtype == "f64" ? attack_typed<double>(cfg, a, ctx) : attack_typed<float>(cfg, a, ctx);
}

// ---------------------------------------------------------------- report

inline int cmd_report(const std::string& in, const std::string& out, Context& ctx) {
  if (!fs::is_directory(in)) throw ArgumentError("--in " + in + " is not a directory");
  std::vector<fs::path> csvs, waves;
  for (const auto& e : fs::directory_iterator(in)) {
    if (e.path().extension() != ".csv") continue;
    const auto stem = e.path().stem().string();
    if (stem.ends_with("_waveforms")) waves.push_back(e.path());
    else if (!stem.ends_with("_comparison")) csvs.push_back(e.path());
  }
  std::sort(csvs.begin(), csvs.end());
  std::sort(waves.begin(), waves.end());
  std::vector<RobustnessReport> reports;
  for (const auto& p : csvs) reports.push_back(read_report(p));
  std::vector<WaveformPanel> panels;
  for (const auto& p : waves) panels.push_back(read_waveform_csv(p));
  const auto written = emit_report(reports, out, panels);
  ctx.out << "wrote " << written.size() << " files to " << out << '\n';
  return kOk;
}

// ---------------------------------------------------------------- gradcheck

inline int cmd_gradcheck(const std::string& arch, std::uint64_t seed, Context& ctx) {
  if (arch != "mlp" && arch != "cnn") throw ArgumentError("--arch must be mlp or cnn");
  bool ok = true;
  for (const auto& r : checks::gradcheck_suite(arch, seed)) {
    ctx.out << checks::format(r) << '\n';
    ok = ok && r.passed;
  }
  for (const auto& r : {checks::attack_containment<float>(2000, seed), checks::attack_containment<double>(2000, seed)}) {
    ctx.out << checks::format(r) << '\n';
    ok = ok && r.passed;
  }
  ctx.out << (ok ? "all checks passed" : "some checks FAILED") << '\n';
  return ok ? kOk : kRuntime;
}

// ---------------------------------------------------------------- entry

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  Context ctx{out, err};
  CLI::App app{"Noise-to-signal-ratio robust training toolkit for heartbeat classification"};
  app.require_subcommand(1);
  app.footer("\n" + config_help() + "\nExit codes: 0 success, 1 validation error, 2 runtime failure.\n"
             "NSR_THREADS sets the default worker count when --threads is absent.");

  PrepareArgs prep;
  auto* p = app.add_subcommand("prepare", "split, balance and write the heartbeat CSVs plus a manifest");
  p->add_option("--train-csv", prep.train_csv, "raw training CSV")->required();
  p->add_option("--test-csv", prep.test_csv, "raw test CSV")->required();
  p->add_option("--out", prep.out, "output directory")->required();
  p->add_option("--seed", prep.seed, "split and balance seed")->capture_default_str();
  p->add_option("--train-fraction", prep.fraction, "share kept for training")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model; writes model.json, best.json, train_log.csv, manifest.json");
  t->add_option("--config", tr.config, "run config JSON (defaults when absent)");
  t->add_option("--out", tr.out, "output directory (default: out_dir from the config)");
  t->add_option("--data", tr.data, "prepared data directory (overrides data.prepared_dir)");
  t->add_option("--epochs", tr.epochs, "override train.epochs");
  t->add_option("--loss", tr.loss, "override loss.kind");
  t->add_option("--seed", tr.seed, "override seed");
  t->add_option("--arch", tr.arch, "override model.arch");
  t->add_option("--threads", tr.threads, "worker threads (default: config, NSR_THREADS, all cores)");

  AttackArgs at;
  auto* a = app.add_subcommand("attack", "robustness curve of a model over the eps grid");
  a->add_option("--model", at.model, "model JSON")->required();
  a->add_option("--method", at.method, "pgd or spsa")->required();
  a->add_option("--config", at.config, "run config JSON (attacks, eps_grid, data)");
  a->add_option("--out", at.out, "report CSV path, or a directory for {arch}_{method}_{attack}.csv")->required();
  a->add_option("--data", at.data, "test CSV (default: data.prepared_dir/test.csv)");
  a->add_option("--attack-id", at.attack_id, "pick an attack entry by id");
  a->add_option("--steps", at.steps, "override PGD steps");
  a->add_option("--per-class", at.per_class, "evaluate the first n rows of each class");
  a->add_option("--label", at.label, "method name used in the report (default: from the model manifest)");
  a->add_option("--waveform-row", at.waveform_row, "also write adversarial waveforms of this test row");
  a->add_option("--threads", at.threads, "worker threads");

  std::string rep_in, rep_out;
  auto* r = app.add_subcommand("report", "comparison CSVs and SVG charts from report CSVs");
  r->add_option("--in", rep_in, "directory of report CSVs")->required();
  r->add_option("--out", rep_out, "output directory")->required();

  std::string gc_arch = "mlp";
  std::uint64_t gc_seed = 0;
  auto* g = app.add_subcommand("gradcheck", "run the linearity, gradient and containment property checks");
  g->add_option("--arch", gc_arch, "mlp or cnn")->capture_default_str();
  g->add_option("--seed", gc_seed, "seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << error_line("usage", e.what()) << '\n';
    return kValidation;
  }

  try {
    if (*p) return cmd_prepare(prep, ctx);
    if (*t) return cmd_train(tr, ctx);
    if (*a) return cmd_attack(at, ctx);
    if (*r) return cmd_report(rep_in, rep_out, ctx);
    if (*g) return cmd_gradcheck(gc_arch, gc_seed, ctx);
  } catch (const Error& e) {
    err << error_line(e.kind(), e.what()) << '\n';
    return is_validation(e) ? kValidation : kRuntime;
  } catch (const std::filesystem::filesystem_error& e) {
    err << error_line("io", e.what()) << '\n';
    return kRuntime;
  } catch (const std::exception& e) {
    err << error_line("runtime", e.what()) << '\n';
    return kRuntime;
  }
  return kValidation;
}

}  // namespace nsr::cli
