#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nsr/errors.hpp"
#include "nsr/model.hpp"

namespace nsr {

enum class LossKind { ce, mse, mse_margin, loss1, loss2, jacob, adv };

inline const char* loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::ce: return "ce";
    case LossKind::mse: return "mse";
    case LossKind::mse_margin: return "mseMargin";
    case LossKind::loss1: return "loss1";
    case LossKind::loss2: return "loss2";
    case LossKind::jacob: return "jacob";
    case LossKind::adv: return "adv";
  }
  return "?";
}

inline std::optional<LossKind> loss_kind_from_name(const std::string& s) {
  for (auto k : {LossKind::ce, LossKind::mse, LossKind::mse_margin, LossKind::loss1, LossKind::loss2,
                 LossKind::jacob, LossKind::adv})
    if (s == loss_kind_name(k)) return k;
  return std::nullopt;
}

struct LossConfig {
  LossKind kind = LossKind::ce;
  double beta1 = 0.2;
  double beta2 = 0.5;
  double gamma = 1.0;
  double eps_max = 1.0;
  double lambda_jac = 0.01;
  /// Regularize every class's effective weight instead of only the true class's.
  bool all_classes = false;
  /// adv only: PGD radius and steps used to craft training examples.
  double adv_eps = 0.1;
  int adv_steps = 10;

  void validate() const {
    if (beta1 < 0 || beta2 < 0 || lambda_jac < 0 || eps_max < 0)
      throw ArgumentError("beta1, beta2, lambda_jac and eps_max must be non-negative");
    if (kind == LossKind::adv && (adv_eps < 0 || adv_steps < 1))
      throw ArgumentError("adversarial training needs adv_eps >= 0 and adv_steps >= 1");
  }

  /// Method label as used in reports, e.g. "loss2" or "adv0.1".
  std::string method_name() const {
    if (kind != LossKind::adv) return loss_kind_name(kind);
    std::string e = std::to_string(adv_eps);
    e.erase(e.find_last_not_of('0') + 1);
    if (e.back() == '.') e.pop_back();
    return "adv" + e;
  }
};

inline constexpr double kR2Stabilizer = 1e-8;
inline constexpr double kR1MinNormSq = 1e-12;

namespace detail {

inline void check_label(int y, std::size_t classes) {
  if (y < 0 || static_cast<std::size_t>(y) >= classes)
    throw ArgumentError("label " + std::to_string(y) + " out of range [0, " + std::to_string(classes) + ")");
}

template <typename T>
T sgn(T v) {
  return static_cast<T>((T(0) < v) - (v < T(0)));
}

template <typename T>
bool is_correct(std::span<const T> z, int y) {
  return std::max_element(z.begin(), z.end()) - z.begin() == y;
}

}  // namespace detail

/// (z_y - 1)^2 + Σ_{i≠y} z_i^2
template <typename T>
T mse_onehot(std::span<const T> z, int y) {
  detail::check_label(y, z.size());
  T s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const T d = z[i] - (static_cast<int>(i) == y ? T(1) : T(0));
    s += d * d;
  }
  return s;
}

/// Σ_{i≠y} max(0, 1 - z_y + z_i). The i = y term would add a constant 1.
template <typename T>
T margin_loss(std::span<const T> z, int y) {
  detail::check_label(y, z.size());
  T s = 0;
  for (std::size_t i = 0; i < z.size(); ++i)
    if (static_cast<int>(i) != y) s += std::max(T(0), T(1) - z[y] + z[i]);
  return s;
}

/// -log softmax(z)_y, max-shifted.
template <typename T>
T cross_entropy(std::span<const T> z, int y) {
  detail::check_label(y, z.size());
  const T mx = *std::max_element(z.begin(), z.end());
  T s = 0;
  for (T v : z) s += std::exp(v - mx);
  return std::log(s) + mx - z[y];
}

/// ‖w_y - γ x/(xᵀx)‖²; nullopt when xᵀx is too small to divide by.
template <typename T>
std::optional<T> reg_r1(std::span<const T> w, std::span<const T> x, double gamma) {
  if (w.size() != x.size()) throw DimensionError("reg_r1: w and x differ in length");
  T xx = 0;
  for (T v : x) xx += v * v;
  if (xx < kR1MinNormSq) return std::nullopt;
  const T c = static_cast<T>(gamma) / xx;
  T s = 0;
  for (std::size_t j = 0; j < w.size(); ++j) {
    const T d = w[j] - c * x[j];
    s += d * d;
  }
  return s;
}

/// ‖w_y‖₁ ε_max / (|z_y| + 1e-8)
template <typename T>
T reg_r2(std::span<const T> w, T z_y, double eps_max) {
  T l1 = 0;
  for (T v : w) l1 += std::abs(v);
  return l1 * static_cast<T>(eps_max) / (std::abs(z_y) + static_cast<T>(kR2Stabilizer));
}

/// Value and derivatives of a batch loss, plus gating diagnostics.
template <typename T>
struct LossEval {
  ObjectiveGrad<T> grad;
  std::size_t correct = 0;
  std::size_t r1_skipped = 0;

  T value() const { return grad.value; }
};

/// Effective weight rows available to a loss, one EffectiveRows per requested class layout.
template <typename T>
using EffectiveBatch = std::vector<std::shared_ptr<const EffectiveRows<T>>>;

namespace detail {

template <typename T>
struct RowRef {
  std::span<const T> w;
  std::size_t term = 0;
};

template <typename T>
std::optional<RowRef<T>> find_row(const EffectiveBatch<T>& eff, std::size_t n, int cls) {
  for (std::size_t t = 0; t < eff.size(); ++t)
    if (eff[t] && n < eff[t]->classes.size() && eff[t]->classes[n] == cls)
      return RowRef<T>{eff[t]->w.row(n), t};
  return std::nullopt;
}

template <typename T>
ObjectiveGrad<T> empty_objective(std::size_t n, std::size_t classes, const EffectiveBatch<T>& eff,
                                 std::size_t dim) {
  ObjectiveGrad<T> g;
  g.dlogits = Tensor<T>({n, classes});
  for (const auto& rows : eff) g.terms.push_back({rows->classes, Tensor<T>({n, dim}), rows});
  return g;
}

template <typename T>
void add_mse(std::span<const T> z, int y, T scale, T& value, std::span<T> dz) {
  value += scale * mse_onehot(z, y);
  for (std::size_t i = 0; i < z.size(); ++i)
    dz[i] += scale * T(2) * (z[i] - (static_cast<int>(i) == y ? T(1) : T(0)));
}

template <typename T>
void add_margin(std::span<const T> z, int y, T scale, T& value, std::span<T> dz) {
  value += scale * margin_loss(z, y);
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (static_cast<int>(i) == y) continue;
    if (T(1) - z[y] + z[i] > T(0)) {
      dz[i] += scale;
      dz[y] -= scale;
    }
  }
}

template <typename T>
void add_ce(std::span<const T> z, int y, T scale, T& value, std::span<T> dz) {
  value += scale * cross_entropy(z, y);
  const T mx = *std::max_element(z.begin(), z.end());
  T s = 0;
  for (T v : z) s += std::exp(v - mx);
  for (std::size_t i = 0; i < z.size(); ++i)
    dz[i] += scale * (std::exp(z[i] - mx) / s - (static_cast<int>(i) == y ? T(1) : T(0)));
}

template <typename T>
void check_batch(const Tensor<T>& logits, const std::vector<int>& y) {
  if (logits.rank() != 2 || logits.dim(0) != y.size())
    throw DimensionError("logits " + shape_string(logits.shape()) + " do not match " +
                         std::to_string(y.size()) + " labels");
  for (int v : y) check_label(v, logits.dim(1));
}

/// Shared skeleton of loss1 / loss2: MSE always, margin + regularizer on correct samples.
template <typename T, typename Reg>
LossEval<T> gated_loss(const Tensor<T>& logits, const EffectiveBatch<T>& eff, const Tensor<T>& x,
                       const std::vector<int>& y, bool all_classes, Reg&& reg) {
  check_batch(logits, y);
  const std::size_t n = y.size(), k = logits.dim(1);
  const std::size_t dim = x.size() / std::max<std::size_t>(n, 1);
  if (x.dim(0) != n) throw DimensionError("x batch does not match labels");
  LossEval<T> out;
  out.grad = empty_objective(n, k, eff, dim);
  const T scale = T(1) / static_cast<T>(std::max<std::size_t>(n, 1));
  T value = 0;
  for (std::size_t s = 0; s < n; ++s) {
    auto z = logits.row(s);
    auto dz = out.grad.dlogits.row(s);
    add_mse(z, y[s], scale, value, dz);
    if (!is_correct(z, y[s])) continue;
    ++out.correct;
    add_margin(z, y[s], scale, value, dz);
    const int first = all_classes ? 0 : y[s];
    const int last = all_classes ? static_cast<int>(k) - 1 : y[s];
    for (int c = first; c <= last; ++c) {
      auto ref = find_row(eff, s, c);
      if (!ref)
        throw ContractError("effective weight w_" + std::to_string(c) + " missing for gated sample " +
                            std::to_string(s));
      reg(s, c, ref->w, x.row(s), z, scale, value, dz, out.grad.terms[ref->term].g.row(s), out);
    }
  }
  out.grad.value = value;
  return out;
}

}  // namespace detail

template <typename T>
LossEval<T> ce_batch(const Tensor<T>& logits, const std::vector<int>& y) {
  detail::check_batch(logits, y);
  LossEval<T> out;
  out.grad.dlogits = Tensor<T>(logits.shape());
  const T scale = T(1) / static_cast<T>(std::max<std::size_t>(y.size(), 1));
  T value = 0;
  for (std::size_t s = 0; s < y.size(); ++s) {
    detail::add_ce(logits.row(s), y[s], scale, value, out.grad.dlogits.row(s));
    out.correct += detail::is_correct(logits.row(s), y[s]);
  }
  out.grad.value = value;
  return out;
}

template <typename T>
LossEval<T> mse_batch(const Tensor<T>& logits, const std::vector<int>& y) {
  detail::check_batch(logits, y);
  LossEval<T> out;
  out.grad.dlogits = Tensor<T>(logits.shape());
  const T scale = T(1) / static_cast<T>(std::max<std::size_t>(y.size(), 1));
  T value = 0;
  for (std::size_t s = 0; s < y.size(); ++s) {
    detail::add_mse(logits.row(s), y[s], scale, value, out.grad.dlogits.row(s));
    out.correct += detail::is_correct(logits.row(s), y[s]);
  }
  out.grad.value = value;
  return out;
}

/// MSE on every sample plus the margin term on correctly classified ones.
template <typename T>
LossEval<T> mse_margin_batch(const Tensor<T>& logits, const std::vector<int>& y) {
  detail::check_batch(logits, y);
  LossEval<T> out;
  out.grad.dlogits = Tensor<T>(logits.shape());
  const T scale = T(1) / static_cast<T>(std::max<std::size_t>(y.size(), 1));
  T value = 0;
  for (std::size_t s = 0; s < y.size(); ++s) {
    auto z = logits.row(s);
    detail::add_mse(z, y[s], scale, value, out.grad.dlogits.row(s));
    if (detail::is_correct(z, y[s])) {
      ++out.correct;
      detail::add_margin(z, y[s], scale, value, out.grad.dlogits.row(s));
    }
  }
  out.grad.value = value;
  return out;
}

/**
 * Mean over the batch of mse_onehot + [correct] (margin + β₁·R1).
 * `eff` must hold w_y for every correctly classified sample (every class when
 * cfg.all_classes is set).
 */
template <typename T>
LossEval<T> loss1_batch(const Tensor<T>& logits, const EffectiveBatch<T>& eff, const Tensor<T>& x,
                        const std::vector<int>& y, const LossConfig& cfg) {
  const T beta = static_cast<T>(cfg.beta1);
  return detail::gated_loss<T>(
      logits, eff, x, y, cfg.all_classes,
      [&](std::size_t, int, std::span<const T> w, std::span<const T> xs, std::span<const T>, T scale,
          T& value, std::span<T>, std::span<T> gw, LossEval<T>& out) {
        const auto r1 = reg_r1(w, xs, cfg.gamma);
        if (!r1) {
          ++out.r1_skipped;
          return;
        }
        value += scale * beta * *r1;
        T xx = 0;
        for (T v : xs) xx += v * v;
        const T c = static_cast<T>(cfg.gamma) / xx;
        for (std::size_t j = 0; j < w.size(); ++j) gw[j] += scale * beta * T(2) * (w[j] - c * xs[j]);
      });
}

/// Mean over the batch of mse_onehot + [correct] (margin + β₂·log(1 + R2)).
template <typename T>
LossEval<T> loss2_batch(const Tensor<T>& logits, const EffectiveBatch<T>& eff, const Tensor<T>& x,
                        const std::vector<int>& y, const LossConfig& cfg) {
  const T beta = static_cast<T>(cfg.beta2);
  const T eps = static_cast<T>(cfg.eps_max);
  if (!cfg.all_classes) {
    return detail::gated_loss<T>(
        logits, eff, x, y, false,
        [&](std::size_t, int c, std::span<const T> w, std::span<const T>, std::span<const T> z,
            T scale, T& value, std::span<T> dz, std::span<T> gw, LossEval<T>&) {
          const T den = std::abs(z[c]) + static_cast<T>(kR2Stabilizer);
          T l1 = 0;
          for (T v : w) l1 += std::abs(v);
          const T r2 = l1 * eps / den;
          value += scale * beta * std::log1p(r2);
          const T outer = scale * beta / (T(1) + r2);
          for (std::size_t j = 0; j < w.size(); ++j) gw[j] += outer * eps * detail::sgn(w[j]) / den;
          dz[c] -= outer * l1 * eps * detail::sgn(z[c]) / (den * den);
        });
  }
  // Summed-over-classes variant: R2 = Σ_i ‖w_i‖₁ ε / |z_i| inside a single log.
  detail::check_batch(logits, y);
  const std::size_t n = y.size(), k = logits.dim(1);
  const std::size_t dim = x.size() / std::max<std::size_t>(n, 1);
  LossEval<T> out;
  out.grad = detail::empty_objective(n, k, eff, dim);
  const T scale = T(1) / static_cast<T>(std::max<std::size_t>(n, 1));
  T value = 0;
  for (std::size_t s = 0; s < n; ++s) {
    auto z = logits.row(s);
    auto dz = out.grad.dlogits.row(s);
    detail::add_mse(z, y[s], scale, value, dz);
    if (!detail::is_correct(z, y[s])) continue;
    ++out.correct;
    detail::add_margin(z, y[s], scale, value, dz);
    std::vector<detail::RowRef<T>> refs;
    T r2 = 0;
    for (int c = 0; c < static_cast<int>(k); ++c) {
      auto ref = detail::find_row(eff, s, c);
      if (!ref) throw ContractError("effective weight w_" + std::to_string(c) + " missing for gated sample");
      refs.push_back(*ref);
      r2 += reg_r2(ref->w, z[c], cfg.eps_max);
    }
    value += scale * beta * std::log1p(r2);
    const T outer = scale * beta / (T(1) + r2);
    for (int c = 0; c < static_cast<int>(k); ++c) {
      const auto& w = refs[c].w;
      const T den = std::abs(z[c]) + static_cast<T>(kR2Stabilizer);
      T l1 = 0;
      for (T v : w) l1 += std::abs(v);
      auto gw = out.grad.terms[refs[c].term].g.row(s);
      for (std::size_t j = 0; j < w.size(); ++j) gw[j] += outer * eps * detail::sgn(w[j]) / den;
      dz[c] -= outer * l1 * eps * detail::sgn(z[c]) / (den * den);
    }
  }
  out.grad.value = value;
  return out;
}

/// Effective rows for class `cls` on samples where keep[n] holds, -1 elsewhere.
template <typename T>
std::shared_ptr<const EffectiveRows<T>> rows_for(const Model<T>& m, const MaskRecord& masks,
                                                 const std::vector<int>& cls,
                                                 const std::vector<bool>& keep) {
  std::vector<int> c(cls.size(), -1);
  for (std::size_t i = 0; i < cls.size(); ++i)
    if (keep[i]) c[i] = cls[i];
  return std::make_shared<const EffectiveRows<T>>(effective_rows(m, masks, c));
}

/// cross_entropy + (λ/2)‖∂z/∂x‖²_F per sample, Jacobian rows from the frozen region.
template <typename T>
LossEval<T> jacobian_batch(const Model<T>& m, const ForwardResult<T>& fwd, const std::vector<int>& y,
                           double lambda) {
  LossEval<T> out = ce_batch(fwd.logits, y);
  if (lambda == 0) return out;
  const std::size_t n = y.size();
  const T scale = T(1) / static_cast<T>(std::max<std::size_t>(n, 1));
  const T lam = static_cast<T>(lambda);
  for (std::size_t c = 0; c < m.class_count(); ++c) {
    auto rows = std::make_shared<const EffectiveRows<T>>(
        effective_rows(m, fwd.masks, std::vector<int>(n, static_cast<int>(c))));
    Tensor<T> g = rows->w;
    for (auto& v : g.data()) {
      out.grad.value += scale * lam * T(0.5) * v * v;
      v *= scale * lam;
    }
    out.grad.terms.push_back({rows->classes, std::move(g), rows});
  }
  return out;
}

/// 0.5·CE(x, y) + 0.5·CE(x_adv, y), batch mean.
template <typename T>
T adv_loss(const Model<T>& m, const Tensor<T>& x, const Tensor<T>& x_adv, const std::vector<int>& y) {
  if (x.shape() != x_adv.shape())
    throw ArgumentError("adv_loss: x " + shape_string(x.shape()) + " and x_adv " +
                        shape_string(x_adv.shape()) + " differ");
  return T(0.5) * ce_batch(predict_logits(m, x), y).value() +
         T(0.5) * ce_batch(predict_logits(m, x_adv), y).value();
}

/// Whether a loss needs effective weights from the frozen region.
inline bool needs_effective_weights(LossKind k) {
  return k == LossKind::loss1 || k == LossKind::loss2 || k == LossKind::jacob;
}

/**
 * Evaluates a catalog loss on a recorded forward pass, computing only the
 * effective rows it needs (w_y of correctly classified samples for loss1/2).
 * `adv` is evaluated as plain cross-entropy on whatever batch is passed.
 */
template <typename T>
LossEval<T> evaluate_loss(const Model<T>& m, const ForwardResult<T>& fwd, const Tensor<T>& x,
                          const std::vector<int>& y, const LossConfig& cfg) {
  cfg.validate();
  switch (cfg.kind) {
    case LossKind::ce:
    case LossKind::adv:
      return ce_batch(fwd.logits, y);
    case LossKind::mse:
      return mse_batch(fwd.logits, y);
    case LossKind::mse_margin:
      return mse_margin_batch(fwd.logits, y);
    case LossKind::jacob:
      return jacobian_batch(m, fwd, y, cfg.lambda_jac);
    case LossKind::loss1:
    case LossKind::loss2: {
      const Tensor<T> xb = x.reshaped({y.size(), m.input_dim()});
      detail::check_batch(fwd.logits, y);
      std::vector<bool> correct(y.size());
      for (std::size_t s = 0; s < y.size(); ++s) correct[s] = detail::is_correct(fwd.logits.row(s), y[s]);
      EffectiveBatch<T> eff;
      if (cfg.all_classes) {
        for (std::size_t c = 0; c < m.class_count(); ++c)
          eff.push_back(rows_for(m, fwd.masks, std::vector<int>(y.size(), static_cast<int>(c)), correct));
      } else {
        eff.push_back(rows_for(m, fwd.masks, y, correct));
      }
      return cfg.kind == LossKind::loss1 ? loss1_batch(fwd.logits, eff, xb, y, cfg)
                                         : loss2_batch(fwd.logits, eff, xb, y, cfg);
    }
  }
  throw ArgumentError("unknown loss kind");
}

}  // namespace nsr
