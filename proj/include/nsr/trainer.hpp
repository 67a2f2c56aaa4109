#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "nsr/attacks.hpp"
#include "nsr/data.hpp"
#include "nsr/errors.hpp"
#include "nsr/losses.hpp"
#include "nsr/metrics.hpp"
#include "nsr/model.hpp"
#include "nsr/persistence.hpp"

namespace nsr {

struct AdamaxConfig {
  double lr = 0.001;
  double beta_m = 0.9;
  double beta_u = 0.999;
  double stab = 1e-8;
};

template <typename T>
struct AdamaxState {
  Gradients<T> m;  // first moment
  Gradients<T> u;  // exponentially weighted infinity norm
};

/**
 * m ← β_m·m + (1-β_m)·g;  u ← max(β_u·u, |g|);  θ ← θ - lr/(1-β_m^t) · m/(u + stab)
 */
template <typename T>
void adamax_step(std::vector<Param<T>>& params, const Gradients<T>& grads, AdamaxState<T>& state,
                 std::uint64_t t, const AdamaxConfig& cfg) {
  if (t < 1) throw ArgumentError("adamax step index starts at 1");
  if (grads.size() != params.size()) throw DimensionError("gradient count does not match parameters");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.value.shape());
      state.u.emplace_back(p.value.shape());
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].value.shape() || state.m[i].shape() != params[i].value.shape())
      throw DimensionError("gradient/state shape mismatch for " + params[i].name);
    if (!grads[i].all_finite()) throw TrainingError("non-finite gradient for parameter " + params[i].name);
  }
  const T bm = static_cast<T>(cfg.beta_m), bu = static_cast<T>(cfg.beta_u);
  const T stab = static_cast<T>(cfg.stab);
  const T step = static_cast<T>(cfg.lr / (1.0 - std::pow(cfg.beta_m, static_cast<double>(t))));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto th = params[i].value.data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto u = state.u[i].data();
    for (std::size_t j = 0; j < th.size(); ++j) {
      m[j] = bm * m[j] + (T(1) - bm) * g[j];
      u[j] = std::max(bu * u[j], std::abs(g[j]));
      th[j] -= step * m[j] / (u[j] + stab);
    }
  }
}

struct TrainConfig {
  LossConfig loss;
  int epochs = 50;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  AdamaxConfig optimizer;
  /// Rows used for the end-of-epoch clean training accuracy (0 = all).
  std::size_t train_eval_rows = 10000;
  /// Where divergence checkpoints go; empty = no file.
  std::filesystem::path checkpoint_dir;

  void validate() const {
    loss.validate();
    if (epochs < 1) throw ArgumentError("epochs must be at least 1");
    if (!(optimizer.lr > 0)) throw ArgumentError("learning rate must be positive");
    if (batch_size < 1) throw ArgumentError("batch size must be at least 1");
  }
};

struct EpochRow {
  int epoch = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_acc = 0;
  double val_prec = 0;
  double gated_fraction = 0;
  double wall_time_s = 0;
};

struct TrainLog {
  std::vector<EpochRow> rows;

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write training log " + path.string());
    out << "epoch,train_loss,train_acc,val_acc,val_prec,gated_fraction,wall_time_s\n";
    out.precision(9);
    for (const auto& r : rows)
      out << r.epoch << ',' << r.train_loss << ',' << r.train_acc << ',' << r.val_acc << ',' << r.val_prec
          << ',' << r.gated_fraction << ',' << r.wall_time_s << '\n';
  }
};

template <typename T>
struct TrainResult {
  Model<T> final_model;
  Model<T> best_model;
  int best_epoch = 0;
  TrainLog log;
};

namespace stream_ids {
inline constexpr std::uint64_t init = 4;
inline constexpr std::uint64_t adv_training = 5;
}  // namespace stream_ids

/// Loss and parameter gradients of one batch under the configured loss.
template <typename T>
struct BatchStep {
  T loss = 0;
  std::size_t correct = 0;
  Gradients<T> grads;
};

template <typename T>
BatchStep<T> batch_gradients(const Model<T>& m, const Tensor<T>& x, const std::vector<int>& y,
                             const LossConfig& loss, const RandStream* adv_rng = nullptr) {
  BatchStep<T> step;
  if (loss.kind == LossKind::adv) {
    PgdConfig pgd;
    pgd.eps = loss.adv_eps;
    pgd.steps = loss.adv_steps;
    const RandStream rng = adv_rng ? *adv_rng : RandStream(0, stream_ids::adv_training);
    const Tensor<T> x_adv = pgd_attack(m, x, y, pgd, rng);
    // Equal-weight clean/adversarial CE is the mean CE over the stacked batch.
    std::vector<T> both(x.data().begin(), x.data().end());
    both.insert(both.end(), x_adv.data().begin(), x_adv.data().end());
    std::vector<int> yy = y;
    yy.insert(yy.end(), y.begin(), y.end());
    const Tensor<T> xx({2 * y.size(), m.input_dim()}, std::move(both));
    const auto fwd = forward(m, xx);
    const auto eval = ce_batch(fwd.logits, yy);
    step.loss = eval.value();
    for (std::size_t s = 0; s < y.size(); ++s) step.correct += detail::is_correct(fwd.logits.row(s), y[s]);
    step.grads = backprop_frozen(m, fwd, eval.grad);
    return step;
  }
  const auto fwd = forward(m, x);
  const auto eval = evaluate_loss(m, fwd, x, y, loss);
  step.loss = eval.value();
  step.correct = eval.correct;
  step.grads = backprop_frozen(m, fwd, eval.grad);
  return step;
}

/**
 * Adamax training. Each batch: forward, gate on current correctness, effective
 * weights where the loss needs them, frozen-mask backprop, one Adamax step.
 * The best-validation-accuracy model is kept alongside the final one.
 */
template <typename T>
TrainResult<T> train(Model<T> model, const HeartbeatSet& train_set, const HeartbeatSet* val_set,
                     const TrainConfig& cfg,
                     const std::function<void(const EpochRow&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.size() == 0) throw ArgumentError("training set is empty");
  if (train_set.length() != model.input_dim())
    throw DimensionError("training rows have length " + std::to_string(train_set.length()) +
                         ", model expects " + std::to_string(model.input_dim()));
  TrainResult<T> result;
  result.best_model = model;
  double best_val = -1;
  AdamaxState<T> state;
  std::uint64_t t = 0;

  std::vector<std::size_t> eval_rows;
  {
    const std::size_t n = cfg.train_eval_rows ? std::min(cfg.train_eval_rows, train_set.size()) : train_set.size();
    for (std::size_t i = 0; i < n; ++i) eval_rows.push_back(i);
  }
  const HeartbeatSet train_eval = subset(train_set, eval_rows);
  const RandStream adv_root(cfg.seed, stream_ids::adv_training);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const Model<T> epoch_start = model;
    BatchIterator<T> it(train_set, cfg.batch_size, cfg.seed, static_cast<std::uint64_t>(epoch));
    Batch<T> b;
    double loss_sum = 0;
    std::size_t seen = 0, correct = 0, batch_no = 0;
    while (it.next(b)) {
      const RandStream adv_rng = adv_root.derive(static_cast<std::uint64_t>(epoch) << 32 | batch_no++);
      auto step = batch_gradients(model, b.x, b.y, cfg.loss, &adv_rng);
      bool finite = std::isfinite(static_cast<double>(step.loss));
      for (const auto& g : step.grads) finite = finite && g.all_finite();
      if (!finite) {
        std::string where = "(no checkpoint directory configured)";
        if (!cfg.checkpoint_dir.empty()) {
          std::filesystem::create_directories(cfg.checkpoint_dir);
          const auto path = cfg.checkpoint_dir / "last_good.json";
          save_model(epoch_start, path);
          where = path.string();
        }
        throw TrainingError("loss diverged in epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_no) + "; last good checkpoint: " + where);
      }
      adamax_step(model.params(), step.grads, state, ++t, cfg.optimizer);
      loss_sum += static_cast<double>(step.loss) * b.y.size();
      seen += b.y.size();
      correct += step.correct;
    }
    EpochRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(seen);
    row.gated_fraction = static_cast<double>(correct) / static_cast<double>(seen);
    row.train_acc = evaluate_clean(model, train_eval).acc;
    if (val_set && val_set->size()) {
      const auto mv = evaluate_clean(model, *val_set);
      row.val_acc = mv.acc;
      row.val_prec = mv.prec;
    }
    if (!val_set || !val_set->size() || row.val_acc > best_val) {
      best_val = row.val_acc;
      result.best_model = model;
      result.best_epoch = epoch;
    }
    row.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.rows.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  result.final_model = std::move(model);
  return result;
}

}  // namespace nsr
