#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "nsr/errors.hpp"
#include "nsr/losses.hpp"
#include "nsr/model.hpp"
#include "nsr/random.hpp"

namespace nsr {

enum class AttackLoss { ce, margin, mse };

inline const char* attack_loss_name(AttackLoss l) {
  switch (l) {
    case AttackLoss::ce: return "ce";
    case AttackLoss::margin: return "margin";
    case AttackLoss::mse: return "mse";
  }
  return "?";
}

inline std::optional<AttackLoss> attack_loss_from_name(const std::string& s) {
  for (auto l : {AttackLoss::ce, AttackLoss::margin, AttackLoss::mse})
    if (s == attack_loss_name(l)) return l;
  return std::nullopt;
}

struct PgdConfig {
  double eps = 0.1;
  int steps = 100;
  /// Defaults to 2.5·eps/steps when unset.
  std::optional<double> step_size;
  bool random_start = true;
  double lo = 0.0, hi = 1.0;
  AttackLoss loss = AttackLoss::ce;

  double alpha() const { return step_size ? *step_size : 2.5 * eps / steps; }

  void validate() const {
    if (eps < 0) throw ArgumentError("PGD eps must be non-negative");
    if (steps < 1) throw ArgumentError("PGD steps must be positive");
    if (step_size && !(*step_size > 0)) throw ArgumentError("PGD step size must be positive");
    if (!(lo < hi)) throw ArgumentError("PGD data bounds need lo < hi");
  }
};

struct SpsaConfig {
  double eps = 0.1;
  int iterations = 100;
  double delta = 0.01;
  double lr = 0.01;
  int pairs = 1024;  // antithetic pairs, 2·pairs evaluations per estimate
  double lo = 0.0, hi = 1.0;

  void validate() const {
    if (eps < 0) throw ArgumentError("SPSA eps must be non-negative");
    if (iterations < 0) throw ArgumentError("SPSA iterations must be non-negative");
    if (!(delta > 0)) throw ArgumentError("SPSA delta must be positive");
    if (!(lr > 0)) throw ArgumentError("SPSA learning rate must be positive");
    if (pairs < 1) throw ArgumentError("SPSA needs at least one pair");
    if (!(lo < hi)) throw ArgumentError("SPSA data bounds need lo < hi");
  }
};

namespace detail {

template <typename T>
void check_in_bounds(const Tensor<T>& x, double lo, double hi) {
  for (T v : x.data())
    if (!(v >= lo - 1e-6 && v <= hi + 1e-6))
      throw ArgumentError("attack input outside data bounds [" + std::to_string(lo) + ", " +
                          std::to_string(hi) + "]");
}

/// Clamp `adv` into [x - eps, x + eps] ∩ [lo, hi], coordinatewise.
template <typename T>
void project(std::span<T> adv, std::span<const T> x, double eps, double lo, double hi) {
  for (std::size_t j = 0; j < adv.size(); ++j) {
    const T a = std::max(static_cast<T>(lo), static_cast<T>(x[j] - eps));
    const T b = std::min(static_cast<T>(hi), static_cast<T>(x[j] + eps));
    adv[j] = std::clamp(adv[j], std::min(a, b), b);
  }
}

/// z_y - max_{i≠y} z_i; negative means misclassified.
template <typename S>
auto logit_margin(const S& z, int y) {
  using T = std::remove_cvref_t<decltype(z[0])>;
  T other = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < z.size(); ++i)
    if (static_cast<int>(i) != y) other = std::max(other, z[i]);
  return z[y] - other;
}

/// d(attack loss)/dz, oriented so that ascending it hurts the true class.
template <typename T>
Tensor<T> attack_loss_grad(const Tensor<T>& logits, const std::vector<int>& y, AttackLoss loss) {
  switch (loss) {
    case AttackLoss::ce:
      return ce_batch(logits, y).grad.dlogits;
    case AttackLoss::mse:
      return mse_batch(logits, y).grad.dlogits;
    case AttackLoss::margin: {
      Tensor<T> g(logits.shape());
      for (std::size_t s = 0; s < y.size(); ++s) {
        auto z = logits.row(s);
        std::size_t best = y[s] == 0 ? 1 : 0;
        for (std::size_t i = 0; i < z.size(); ++i)
          if (static_cast<int>(i) != y[s] && z[i] > z[best]) best = i;
        g(s, best) += T(1);
        g(s, y[s]) -= T(1);
      }
      return g;
    }
  }
  throw ArgumentError("unknown attack loss");
}

}  // namespace detail

/**
 * L∞ projected gradient attack: K sign steps of size α on the attack loss,
 * each followed by projection onto the ε-ball around x intersected with the
 * data bounds. Row n draws its random start from rng.derive(n).
 */
template <typename T>
Tensor<T> pgd_attack(const Model<T>& m, const Tensor<T>& x_in, const std::vector<int>& y,
                     const PgdConfig& cfg, const RandStream& rng) {
  cfg.validate();
  const Tensor<T> x = detail::as_batch(m, x_in);
  if (x.dim(0) != y.size()) throw DimensionError("pgd_attack: batch and labels differ in length");
  detail::check_in_bounds(x, cfg.lo, cfg.hi);
  Tensor<T> adv = x;
  if (cfg.eps == 0) return adv;
  const std::size_t n = x.dim(0);
  if (cfg.random_start) {
    for (std::size_t s = 0; s < n; ++s) {
      RandStream r = rng.derive(s);
      auto a = adv.row(s);
      for (auto& v : a) v += static_cast<T>(r.uniform(-cfg.eps, cfg.eps));
      detail::project(a, x.row(s), cfg.eps, cfg.lo, cfg.hi);
    }
  }
  const T alpha = static_cast<T>(cfg.alpha());
  for (int k = 0; k < cfg.steps; ++k) {
    const auto fwd = forward(m, adv, false);
    const Tensor<T> grad = pullback(m, fwd.masks, detail::attack_loss_grad(fwd.logits, y, cfg.loss));
    auto a = adv.data();
    auto g = grad.data();
    for (std::size_t j = 0; j < a.size(); ++j) a[j] += alpha * detail::sgn(g[j]);
    for (std::size_t s = 0; s < n; ++s) detail::project(adv.row(s), x.row(s), cfg.eps, cfg.lo, cfg.hi);
  }
  return adv;
}

/// Forward-only view of a model: the only access SPSA gets.
template <typename T>
class LogitOracle {
 public:
  explicit LogitOracle(const Model<T>& m) : m_(m) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return predict_logits(m_, x); }
  std::size_t input_dim() const { return m_.input_dim(); }

 private:
  const Model<T>& m_;
};

/**
 * SPSA attack. Each iteration estimates the gradient of the logit margin
 * z_y - max_{i≠y} z_i from `pairs` antithetic Rademacher probes of size δ,
 * takes an Adamax step (lr) that lowers the margin, and projects. Returns the
 * lowest-margin iterate seen, starting from x itself.
 *
 * `oracle(x)` must return logits [N, classes] for a batch; nothing else of the
 * model is used.
 */
template <typename T, typename Oracle>
Tensor<T> spsa_attack_oracle(const Oracle& oracle, const Tensor<T>& x_in, const std::vector<int>& y,
                             const SpsaConfig& cfg, const RandStream& rng) {
  cfg.validate();
  const std::size_t d = oracle.input_dim();
  if (x_in.size() != y.size() * d) throw DimensionError("spsa_attack: batch and labels differ in length");
  const Tensor<T> x = x_in.reshaped({y.size(), d});
  detail::check_in_bounds(x, cfg.lo, cfg.hi);
  Tensor<T> best = x;
  if (cfg.eps == 0 || cfg.iterations == 0) return best;

  const std::size_t P = static_cast<std::size_t>(cfg.pairs);
  const T delta = static_cast<T>(cfg.delta);
  Tensor<T> probes({2 * P, d});
  std::vector<T> v(P * d), m(d), u(d), ghat(d), cur(d);
  const Tensor<T> clean = oracle(x);
  for (std::size_t s = 0; s < y.size(); ++s) {
    RandStream r = rng.derive(s);
    auto xs = x.row(s);
    std::copy(xs.begin(), xs.end(), cur.begin());
    std::fill(m.begin(), m.end(), T(0));
    std::fill(u.begin(), u.end(), T(0));
    T best_margin = detail::logit_margin(clean.row(s), y[s]);
    for (int it = 1; it <= cfg.iterations; ++it) {
      for (std::size_t p = 0; p < P; ++p) {
        auto plus = probes.row(2 * p), minus = probes.row(2 * p + 1);
        for (std::size_t j = 0; j < d; ++j) {
          const T sgn = static_cast<T>(r.sign());
          v[p * d + j] = sgn;
          plus[j] = cur[j] + delta * sgn;
          minus[j] = cur[j] - delta * sgn;
        }
      }
      const Tensor<T> z = oracle(probes);
      std::fill(ghat.begin(), ghat.end(), T(0));
      for (std::size_t p = 0; p < P; ++p) {
        const T diff = (detail::logit_margin(z.row(2 * p), y[s]) -
                        detail::logit_margin(z.row(2 * p + 1), y[s])) /
                       (T(2) * delta * static_cast<T>(P));
        for (std::size_t j = 0; j < d; ++j) ghat[j] += diff * v[p * d + j];
      }
      const T corr = static_cast<T>(cfg.lr / (1.0 - std::pow(0.9, it)));
      for (std::size_t j = 0; j < d; ++j) {
        m[j] = T(0.9) * m[j] + T(0.1) * ghat[j];
        u[j] = std::max(T(0.999) * u[j], std::abs(ghat[j]));
        cur[j] -= corr * m[j] / (u[j] + T(1e-8));
      }
      detail::project(std::span<T>(cur), xs, cfg.eps, cfg.lo, cfg.hi);
      const Tensor<T> probe({1, d}, std::vector<T>(cur.begin(), cur.end()));
      const T margin = detail::logit_margin(oracle(probe).row(0), y[s]);
      if (margin < best_margin) {
        best_margin = margin;
        std::copy(cur.begin(), cur.end(), best.row(s).begin());
      }
    }
  }
  return best;
}

template <typename T>
Tensor<T> spsa_attack(const Model<T>& m, const Tensor<T>& x, const std::vector<int>& y,
                      const SpsaConfig& cfg, const RandStream& rng) {
  return spsa_attack_oracle<T>(LogitOracle<T>(m), x, y, cfg, rng);
}

}  // namespace nsr
