// Desk-scale acceptance run on the MIT-BIH heartbeat CSVs (MLP track; CNN with NSR_DESK_CNN=1).
// Needs NSR_ECG_DIR with mitbih_train.csv and mitbih_test.csv; exits 77 (skipped) without them.
// Optional: NSR_DESK_EPOCHS, NSR_DESK_PER_CLASS (default 400), NSR_DESK_OUT (report directory).

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "nsr/parallel.hpp"
#include "nsr/pipeline.hpp"

using namespace nsr;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kCriteria = {
    "clean accuracy (ce ACC/PREC >= 0.90, loss1 ACC >= 0.89, loss2 ACC >= 0.87)",
    "100-PGD eps=0.1: loss2 >= ce + 0.30, loss2 >= mseMargin + 0.15, loss2 in 0.61 +- 0.07",
    "100-PGD ACC <= 20-PGD ACC + 0.02 for every method and eps",
    "adv0.1 and adv0.2 curves cross between eps 0.05 and 0.2",
    "reduced SPSA eps=0.1: loss2 > ce and loss2 >= 0.20",
    "alignment: mean cosine loss1 > ce",
};

long env_long(const char* name, long fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::stol(v) : fallback;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << v;
  return s.str();
}

struct Line {
  bool ok = true;
  std::string detail;
  void check(bool cond, const std::string& what) {
    ok = ok && cond;
    detail += (detail.empty() ? "" : "; ") + what + (cond ? "" : " [violated]");
  }
};

double acc_at(const RobustnessReport& r, double eps) {
  for (const auto& row : r.rows)
    if (std::abs(row.eps - eps) < 1e-12) return row.acc;
  throw ArgumentError("eps " + fmt(eps) + " not on the curve");
}

LossConfig method(const std::string& name) {
  LossConfig l;
  if (name == "adv0.1" || name == "adv0.2") {
    l.kind = LossKind::adv;
    l.adv_eps = name == "adv0.1" ? 0.1 : 0.2;
  } else {
    l.kind = *loss_kind_from_name(name);
  }
  return l;
}

bool run_track(const std::string& arch, const PreparedData& data, int epochs, std::size_t per_class,
               const fs::path& out, bool ordering_only) {
  const std::vector<std::string> methods = {"ce", "mseMargin", "loss1", "loss2", "adv0.1", "adv0.2"};
  const std::size_t threads = default_threads();
  RunConfig base;
  base.arch = arch;
  base.train.epochs = epochs;

  std::map<std::string, Model<float>> models;
  for (const auto& name : methods) {
    RunConfig c = base;
    c.train.loss = method(name);
    std::cerr << "[" << arch << "] training " << name << " for " << epochs << " epochs\n";
    auto res = train(initial_model<float>(c), data.train, &data.val, c.train, [&](const EpochRow& r) {
      std::cerr << "  epoch " << r.epoch << " loss " << r.train_loss << " val_acc " << r.val_acc << '\n';
    });
    models.emplace(name, std::move(res.best_model));
  }

  const auto eval = first_per_class(data.test, per_class);
  CurveOptions opt;
  opt.seed = base.seed();
  opt.threads = threads;
  std::map<std::string, Metrics> clean;
  std::map<std::string, RobustnessReport> pgd100, pgd20, spsa;
  SpsaSpec reduced;
  reduced.iterations = 50;
  reduced.pairs = 512;
  const auto spsa_set = first_per_class(data.test, 20);
  std::vector<RobustnessReport> all;
  for (const auto& name : methods) {
    const auto& m = models.at(name);
    clean[name] = evaluate_clean(m, data.test);
    std::cerr << "[" << arch << "] attacking " << name << '\n';
    for (auto* target : {&pgd100, &pgd20}) {
      auto rep = robustness_curve(m, pgd_spec(target == &pgd100 ? 100 : 20), base.eps_grid, eval, opt);
      rep.arch = arch;
      rep.method = name;
      all.push_back(rep);
      target->emplace(name, std::move(rep));
    }
    if (name == "ce" || name == "loss2") {
      auto rep = robustness_curve(m, spsa_spec(reduced), {0.0, 0.1}, spsa_set, opt);
      rep.arch = arch;
      rep.method = name;
      all.push_back(rep);
      spsa.emplace(name, std::move(rep));
    }
  }
  if (!out.empty()) emit_report(all, out / arch);

  std::vector<Line> lines(kCriteria.size());
  {
    auto& l = lines[0];
    l.check(clean["ce"].acc >= 0.90, "ce ACC " + fmt(clean["ce"].acc));
    l.check(clean["ce"].prec >= 0.90, "ce PREC " + fmt(clean["ce"].prec));
    l.check(clean["loss1"].acc >= 0.89, "loss1 ACC " + fmt(clean["loss1"].acc));
    l.check(clean["loss2"].acc >= 0.87, "loss2 ACC " + fmt(clean["loss2"].acc));
  }
  const double l2 = acc_at(pgd100["loss2"], 0.1), ce = acc_at(pgd100["ce"], 0.1),
               mm = acc_at(pgd100["mseMargin"], 0.1);
  lines[1].check(l2 >= ce + 0.30, "loss2 " + fmt(l2) + " vs ce " + fmt(ce));
  lines[1].check(l2 >= mm + 0.15, "loss2 " + fmt(l2) + " vs mseMargin " + fmt(mm));
  if (!ordering_only) lines[1].check(std::abs(l2 - 0.61) <= 0.07, "loss2 band 0.61 +- 0.07");
  lines[1].detail += "; n=" + std::to_string(eval.size());
  {
    double worst = -1;
    std::string where;
    for (const auto& name : methods)
      for (std::size_t i = 0; i < pgd100[name].rows.size(); ++i) {
        const double gap = pgd100[name].rows[i].acc - pgd20[name].rows[i].acc;
        if (gap > worst) {
          worst = gap;
          where = name + " eps " + fmt(pgd100[name].rows[i].eps);
        }
      }
    lines[2].check(worst <= 0.02, "max(ACC100 - ACC20) " + fmt(worst) + " at " + where);
  }
  {
    std::vector<double> diff;
    for (double e : base.eps_grid)
      if (e >= 0.05 - 1e-12 && e <= 0.2 + 1e-12) diff.push_back(acc_at(pgd100["adv0.1"], e) - acc_at(pgd100["adv0.2"], e));
    bool cross = false;
    std::string d;
    for (std::size_t i = 0; i < diff.size(); ++i) {
      d += (i ? "," : "") + fmt(diff[i]);
      if (i && diff[i - 1] * diff[i] < 0) cross = true;
    }
    lines[3].check(cross, "ACC(adv0.1) - ACC(adv0.2) on [0.05, 0.2] = " + d);
  }
  {
    const double s2 = acc_at(spsa["loss2"], 0.1), sc = acc_at(spsa["ce"], 0.1);
    lines[4].check(s2 > sc, "loss2 " + fmt(s2) + " vs ce " + fmt(sc));
    if (!ordering_only) lines[4].check(s2 >= 0.20, "loss2 floor 0.20");
  }
  {
    const double a1 = alignment_diagnostic(models.at("loss1"), data.test).overall;
    const double a0 = alignment_diagnostic(models.at("ce"), data.test).overall;
    lines[5].check(a1 > a0, "loss1 " + fmt(a1) + " vs ce " + fmt(a0));
  }

  bool ok = true;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::cout << (lines[i].ok ? "PASS " : "FAIL ") << "[" << arch << "] " << kCriteria[i] << ": " << lines[i].detail
              << '\n';
    ok = ok && lines[i].ok;
  }
  return ok;
}

}  // namespace

int main() {
  const char* dir = std::getenv("NSR_ECG_DIR");
  const fs::path root = dir ? dir : "";
  if (!dir || !fs::exists(root / "mitbih_train.csv") || !fs::exists(root / "mitbih_test.csv")) {
    for (const auto& c : kCriteria)
      std::cout << "BLOCKED [mlp] " << c << ": set NSR_ECG_DIR to a directory with mitbih_train.csv and mitbih_test.csv\n";
    return 77;
  }
  try {
    RunConfig defaults;
    const auto data = prepare_data(load_heartbeat_csv(root / "mitbih_train.csv"),
                                   load_heartbeat_csv(root / "mitbih_test.csv"), defaults.train_fraction,
                                   defaults.seed());
    const int epochs = static_cast<int>(env_long("NSR_DESK_EPOCHS", defaults.train.epochs));
    const auto per_class = static_cast<std::size_t>(env_long("NSR_DESK_PER_CLASS", 400));
    const char* out = std::getenv("NSR_DESK_OUT");
    bool ok = run_track("mlp", data, epochs, per_class, out ? fs::path(out) : fs::path(), false);
    if (env_long("NSR_DESK_CNN", 0))
      ok = run_track("cnn", data, static_cast<int>(env_long("NSR_DESK_EPOCHS", 10)), per_class,
                     out ? fs::path(out) : fs::path(), true) && ok;
    return ok ? EXIT_SUCCESS : EXIT_FAILURE;
  } catch (const std::exception& e) {
    std::cout << "FAIL desk-scale run aborted: " << e.what() << '\n';
    return EXIT_FAILURE;
  }
}
