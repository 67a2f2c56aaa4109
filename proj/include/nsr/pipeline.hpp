#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nsr/config.hpp"
#include "nsr/data.hpp"
#include "nsr/metrics.hpp"
#include "nsr/persistence.hpp"
#include "nsr/report.hpp"
#include "nsr/trainer.hpp"

namespace nsr {

/// Pure-train (balanced), validation (natural) and test (balanced) sets.
struct PreparedData {
  HeartbeatSet train, val, test;
  nlohmann::json manifest;
};

inline nlohmann::json set_summary(const HeartbeatSet& s) {
  return {{"rows", s.size()}, {"class_counts", s.class_counts()}, {"digest", s.digest}};
}

/// Split the training file, then balance the pure-train part and the test file.
inline PreparedData prepare_data(const HeartbeatSet& train_file, const HeartbeatSet& test_file,
                                 double train_fraction, std::uint64_t seed) {
  auto [pure, val] = split_train_val(train_file, train_fraction, seed);
  PreparedData p;
  p.train = upsample_balance(pure, seed);
  p.val = std::move(val);
  p.test = upsample_balance(test_file, seed ^ 0x7e57);
  p.manifest = {
      {"seed", seed},
      {"train_fraction", train_fraction},
      {"sources", {{"train", set_summary(train_file)}, {"test", set_summary(test_file)}}},
      {"splits",
       {{"pure_train", set_summary(pure)},
        {"train", set_summary(p.train)},
        {"val", set_summary(p.val)},
        {"test", set_summary(p.test)}}},
  };
  return p;
}

inline void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + " is not valid JSON: " + e.what());
  }
}

inline void write_prepared(const PreparedData& p, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_heartbeat_csv(p.train, dir / "train.csv");
  write_heartbeat_csv(p.val, dir / "val.csv");
  write_heartbeat_csv(p.test, dir / "test.csv");
  write_json(p.manifest, dir / "manifest.json");
}

inline PreparedData load_prepared(const std::filesystem::path& dir) {
  PreparedData p;
  p.train = load_heartbeat_csv(dir / "train.csv");
  p.val = load_heartbeat_csv(dir / "val.csv");
  p.test = load_heartbeat_csv(dir / "test.csv");
  if (std::filesystem::exists(dir / "manifest.json")) p.manifest = read_json(dir / "manifest.json");
  return p;
}

template <typename T>
Model<T> initial_model(const RunConfig& cfg) {
  Model<T> m = build_model<T>(cfg);
  RandStream rng(cfg.seed(), stream_ids::init);
  m.init_glorot(rng);
  return m;
}

/// Validation accuracy under PGD, the β-selection criterion.
template <typename T>
double robust_val_accuracy(const Model<T>& m, const HeartbeatSet& val, double eps, int steps,
                           std::uint64_t seed, std::size_t threads) {
  CurveOptions opt;
  opt.seed = seed;
  opt.threads = threads;
  const auto rep = robustness_curve(m, pgd_spec(steps), {0.0, eps}, val, opt);
  return rep.rows.back().acc;
}

struct SweepRow {
  double value = 0;
  double val_acc = 0;
  double robust_val_acc = 0;
};

/**
 * Trains one model per sweep value and keeps the one with the best robust
 * validation accuracy, plus the per-value scores. An empty sweep trains once.
 */
template <typename T>
std::pair<TrainResult<T>, std::vector<SweepRow>> train_with_sweep(
    const RunConfig& cfg, const PreparedData& data, std::size_t threads,
    const std::function<void(const std::string&)>& log = {},
    const std::function<void(const EpochRow&)>& on_epoch = {}) {
  if (cfg.sweep.values.empty())
    return {train(initial_model<T>(cfg), data.train, &data.val, cfg.train, on_epoch), {}};
  std::string param = cfg.sweep.param;
  if (param == "beta") {
    if (cfg.train.loss.kind == LossKind::loss1) param = "beta1";
    else if (cfg.train.loss.kind == LossKind::loss2) param = "beta2";
    else throw ArgumentError("sweep.param 'beta' needs loss.kind loss1 or loss2");
  }
  std::vector<SweepRow> rows;
  std::optional<TrainResult<T>> best;
  double best_score = -1;
  for (double v : cfg.sweep.values) {
    RunConfig c = cfg;
    (param == "beta1" ? c.train.loss.beta1 : c.train.loss.beta2) = v;
    auto res = train(initial_model<T>(c), data.train, &data.val, c.train, on_epoch);
    SweepRow row;
    row.value = v;
    row.val_acc = evaluate_clean(res.best_model, data.val).acc;
    row.robust_val_acc =
        robust_val_accuracy(res.best_model, data.val, cfg.sweep.eps, cfg.sweep.steps, cfg.seed(), threads);
    if (log)
      log(param + "=" + std::to_string(v) + " val_acc=" + std::to_string(row.val_acc) +
          " robust_val_acc=" + std::to_string(row.robust_val_acc));
    rows.push_back(row);
    if (row.robust_val_acc > best_score) {
      best_score = row.robust_val_acc;
      best = std::move(res);
    }
  }
  return {std::move(*best), rows};
}

/// The evaluation subset an attack entry asks for.
inline HeartbeatSet attack_eval_set(const AttackEntry& a, const HeartbeatSet& test) {
  return a.per_class ? first_per_class(test, a.per_class) : test;
}

}  // namespace nsr
