#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "nsr/attacks.hpp"
#include "nsr/losses.hpp"
#include "nsr/model.hpp"
#include "nsr/random.hpp"
#include "nsr/tensor.hpp"
#include "nsr/trainer.hpp"

// Property checks shared by the `gradcheck` subcommand and the test suites.

namespace nsr::checks {

struct CheckResult {
  std::string name;
  bool passed = false;
  double measured = 0;   // worst observed error or violation count
  double threshold = 0;
  std::string detail;
};

inline std::string sci(double v) {
  std::ostringstream o;
  o << std::scientific;
  o.precision(3);
  o << v;
  return o.str();
}

inline std::string format(const CheckResult& r) {
  std::ostringstream o;
  o << (r.passed ? "PASS " : "FAIL ") << r.name << ": measured=" << r.measured << " threshold=" << r.threshold;
  if (!r.detail.empty()) o << " (" << r.detail << ')';
  return o.str();
}

/// Gives every bias a small random value so bias handling is exercised.
template <typename T>
void randomize_biases(Model<T>& m, RandStream& rng, double scale = 0.1) {
  for (auto& p : m.params())
    if (p.is_bias)
      for (auto& v : p.value.data()) v = static_cast<T>(rng.uniform(-scale, scale));
}

template <typename T>
Model<T> paper_mlp(RandStream& rng) {
  auto m = build_mlp<T>({187, 128, 128, 128, 32, 5});
  m.init_glorot(rng);
  randomize_biases(m, rng);
  return m;
}

template <typename T>
Model<T> paper_cnn(RandStream& rng) {
  auto m = build_cnn<T>(CnnConfig{});
  m.init_glorot(rng);
  randomize_biases(m, rng);
  return m;
}

template <typename T>
Model<T> random_model(const std::string& arch, RandStream& rng) {
  if (arch == "mlp") return paper_mlp<T>(rng);
  if (arch == "cnn") return paper_cnn<T>(rng);
  throw ArgumentError("unknown architecture '" + arch + "' (expected mlp or cnn)");
}

/**
 * z_i against w_iᵀx + b_i for all classes, where w_i is the pulled-back unit
 * vector and b_i is propagated separately through the frozen region.
 */
template <typename T>
CheckResult exact_linearity(const Model<T>& m, const std::string& label, std::size_t samples,
                            std::uint64_t seed) {
  CheckResult r;
  r.name = "exact linearity " + label + " " + dtype_name<T>();
  r.threshold = std::is_same_v<T, float> ? 1e-4 : 1e-9;
  RandStream rng(seed, 101);
  const auto x = rand<T>(rng, Uniform{0, 1}, {samples, m.input_dim()});
  const auto fwd = forward(m, x, false);
  std::vector<std::size_t> all(m.class_count());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto eff = effective_linear(m, x, fwd, all);
  const auto bias = frozen_affine(m, fwd.masks, Tensor<T>({samples, m.input_dim()}));
  double worst = 0, worst_residual = 0;
  for (std::size_t s = 0; s < samples; ++s) {
    auto xs = x.row(s);
    for (std::size_t c = 0; c < all.size(); ++c) {
      auto w = eff[s].w.row(c);
      T dot = 0;
      for (std::size_t j = 0; j < xs.size(); ++j) dot += w[j] * xs[j];
      const double z = static_cast<double>(fwd.logits(s, c));
      worst = std::max(worst, std::abs(z - static_cast<double>(dot + bias(s, c))) / (1 + std::abs(z)));
      worst_residual = std::max(worst_residual, std::abs(z - static_cast<double>(dot + eff[s].b[c])) /
                                                    (1 + std::abs(z)));
    }
  }
  r.measured = std::max(worst, worst_residual);
  r.passed = r.measured < r.threshold;
  r.detail = std::to_string(samples) + " inputs; independent-bias error " + std::to_string(worst);
  return r;
}

/**
 * Perturbations verified to keep every mask: forward(x+δ) against z + Wᵀδ.
 * δ shrinks until the region is unchanged.
 */
template <typename T>
CheckResult frozen_region(const Model<T>& m, const std::string& label, std::size_t samples, std::uint64_t seed,
                          double tol = 1e-9) {
  CheckResult r;
  r.name = "frozen-region exactness " + label;
  r.threshold = tol;
  RandStream rng(seed, 102);
  const std::size_t d = m.input_dim();
  const auto x = rand<T>(rng, Uniform{0.1, 0.9}, {samples, d});
  const auto fwd = forward(m, x, false);
  std::vector<std::size_t> all(m.class_count());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto eff = effective_linear(m, x, fwd, all);
  std::size_t verified = 0;
  double worst = 0;
  for (std::size_t s = 0; s < samples; ++s) {
    Tensor<T> delta({1, d});
    for (auto& v : delta.data()) v = static_cast<T>(rng.uniform(-1, 1));
    for (double scale = 1e-2; scale > 1e-9; scale *= 0.1) {
      Tensor<T> xp({1, d});
      for (std::size_t j = 0; j < d; ++j) xp[j] = x(s, j) + static_cast<T>(scale) * delta[j];
      const auto fp = forward(m, xp, false);
      if (!fwd.masks.same_region(fp.masks, s, 0)) continue;
      ++verified;
      for (std::size_t c = 0; c < all.size(); ++c) {
        auto w = eff[s].w.row(c);
        T lin = 0;
        for (std::size_t j = 0; j < d; ++j) lin += w[j] * static_cast<T>(scale) * delta[j];
        const double predicted = static_cast<double>(fwd.logits(s, c) + lin);
        const double got = static_cast<double>(fp.logits(0, c));
        worst = std::max(worst, std::abs(got - predicted) / (1 + std::abs(got)));
      }
      break;
    }
  }
  r.measured = worst;
  r.passed = verified * 2 >= samples && worst < tol;
  r.detail = std::to_string(verified) + "/" + std::to_string(samples) + " perturbations verified mask-preserving";
  return r;
}

namespace detail {
inline std::string num_label(double v) {
  std::ostringstream o;
  o << v;
  return o.str();
}
}  // namespace detail

/// Kink pattern of a loss at the current parameters: any change invalidates a finite-difference probe.
template <typename T>
std::vector<std::int8_t> kink_signature(const Model<T>& m, const Tensor<T>& x, const std::vector<int>& y) {
  const auto fwd = forward(m, x, false);
  std::vector<std::int8_t> sig;
  for (const auto& layer : fwd.masks.relu)
    for (auto v : layer) sig.push_back(static_cast<std::int8_t>(v));
  for (const auto& layer : fwd.masks.argmax)
    for (auto v : layer) sig.push_back(static_cast<std::int8_t>(v % 127));
  const std::size_t k = m.class_count();
  const auto pred = argmax_rows(fwd.logits);
  for (std::size_t s = 0; s < y.size(); ++s) {
    sig.push_back(static_cast<std::int8_t>(pred[s]));
    const T zy = fwd.logits(s, y[s]);
    for (std::size_t i = 0; i < k; ++i) {
      sig.push_back(static_cast<std::int8_t>(T(1) - zy + fwd.logits(s, i) > T(0)));
      sig.push_back(static_cast<std::int8_t>(nsr::detail::sgn(fwd.logits(s, i))));
    }
  }
  for (std::size_t c = 0; c < k; ++c) {
    const auto eff = effective_rows(m, fwd.masks, std::vector<int>(y.size(), static_cast<int>(c)));
    for (T v : eff.w.data()) sig.push_back(static_cast<std::int8_t>(nsr::detail::sgn(v)));
  }
  return sig;
}

template <typename T>
T loss_value(const Model<T>& m, const Tensor<T>& x, const std::vector<int>& y, const LossConfig& cfg,
             const Tensor<T>* x_adv) {
  if (cfg.kind == LossKind::adv) {
    std::vector<T> both(x.data().begin(), x.data().end());
    both.insert(both.end(), x_adv->data().begin(), x_adv->data().end());
    std::vector<int> yy = y;
    yy.insert(yy.end(), y.begin(), y.end());
    const Tensor<T> xx({2 * y.size(), x.dim(1)}, std::move(both));
    return ce_batch(predict_logits(m, xx), yy).value();
  }
  return evaluate_loss(m, forward(m, x), x, y, cfg).value();
}

template <typename T>
Gradients<T> loss_gradient(const Model<T>& m, const Tensor<T>& x, const std::vector<int>& y,
                           const LossConfig& cfg, const Tensor<T>* x_adv) {
  if (cfg.kind == LossKind::adv) {
    std::vector<T> both(x.data().begin(), x.data().end());
    both.insert(both.end(), x_adv->data().begin(), x_adv->data().end());
    std::vector<int> yy = y;
    yy.insert(yy.end(), y.begin(), y.end());
    const Tensor<T> xx({2 * y.size(), x.dim(1)}, std::move(both));
    const auto fwd = forward(m, xx);
    return backprop_frozen(m, fwd, ce_batch(fwd.logits, yy).grad);
  }
  return batch_gradients(m, x, y, cfg).grads;
}

/**
 * Analytic frozen-mask parameter gradients against central differences over
 * every parameter coordinate. Probes whose ±h evaluation changes any mask,
 * the gating set, a margin hinge, a logit sign or an effective-weight sign are
 * excluded. Error is ‖g_analytic − g_fd‖₂ / max(‖g_analytic‖₂, ‖g_fd‖₂) over
 * the kept coordinates.
 */
inline CheckResult fd_gradient(Model<double> m, const Tensor<double>& x, const std::vector<int>& y,
                               const LossConfig& cfg, const std::string& label, double h = 1e-5,
                               double tol = 1e-3) {
  CheckResult r;
  r.name = "double-backprop " + label + " " + cfg.method_name();
  if (cfg.kind == LossKind::loss1) r.name += " beta1=" + detail::num_label(cfg.beta1);
  if (cfg.kind == LossKind::loss2) r.name += " beta2=" + detail::num_label(cfg.beta2);
  if (cfg.kind == LossKind::jacob) r.name += " lambda=" + detail::num_label(cfg.lambda_jac);
  if (cfg.all_classes) r.name += " all-classes";
  r.threshold = tol;
  Tensor<double> x_adv;
  if (cfg.kind == LossKind::adv) {
    PgdConfig pgd;
    pgd.eps = cfg.adv_eps;
    pgd.steps = cfg.adv_steps;
    x_adv = pgd_attack(m, x, y, pgd, RandStream(17, 5));
  }
  const auto analytic = loss_gradient(m, x, y, cfg, &x_adv);
  const auto base_sig = kink_signature(m, x, y);
  const auto adv_sig = cfg.kind == LossKind::adv ? kink_signature(m, x_adv, y) : std::vector<std::int8_t>{};
  auto same = [&] {
    return kink_signature(m, x, y) == base_sig &&
           (cfg.kind != LossKind::adv || kink_signature(m, x_adv, y) == adv_sig);
  };
  double diff2 = 0, a2 = 0, f2 = 0;
  std::size_t kept = 0, excluded = 0;
  for (std::size_t p = 0; p < m.params().size(); ++p) {
    auto vals = m.params()[p].value.data();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double orig = vals[j];
      vals[j] = orig + h;
      const double up = loss_value(m, x, y, cfg, &x_adv);
      const bool up_ok = same();
      vals[j] = orig - h;
      const double down = loss_value(m, x, y, cfg, &x_adv);
      const bool down_ok = same();
      vals[j] = orig;
      if (!up_ok || !down_ok) {
        ++excluded;
        continue;
      }
      ++kept;
      const double fd = (up - down) / (2 * h);
      const double an = analytic[p][j];
      diff2 += (an - fd) * (an - fd);
      a2 += an * an;
      f2 += fd * fd;
    }
  }
  const double scale = std::sqrt(std::max({a2, f2, 1e-30}));
  r.measured = std::sqrt(diff2) / scale;
  r.passed = kept > 0 && kept >= excluded && r.measured < tol;
  r.detail = std::to_string(kept) + " coordinates, " + std::to_string(excluded) + " excluded at kinks";
  return r;
}

/// A small network with every layer kind, for finite-difference checks.
inline Model<double> toy_cnn(RandStream& rng) {
  CnnConfig cfg;
  cfg.input_length = 16;
  cfg.class_count = 3;
  cfg.blocks = 1;
  cfg.channels = 2;
  cfg.kernel = 3;
  cfg.pool_kernel = 2;
  cfg.pool_stride = 2;
  cfg.dense_width = 4;
  auto m = build_cnn<double>(cfg);
  m.init_glorot(rng);
  randomize_biases(m, rng);
  return m;
}

inline Model<double> toy_mlp(RandStream& rng) {
  auto m = build_mlp<double>({6, 7, 6, 5, 3});
  m.init_glorot(rng);
  randomize_biases(m, rng);
  return m;
}

/// Labels matching the current prediction on most samples so the gated terms are active.
inline std::vector<int> mostly_correct_labels(const Model<double>& m, const Tensor<double>& x) {
  auto pred = argmax_rows(predict_logits(m, x));
  for (std::size_t s = 1; s < pred.size(); s += 3) pred[s] = (pred[s] + 1) % static_cast<int>(m.class_count());
  return pred;
}

inline std::vector<LossConfig> catalog_configs() {
  std::vector<LossConfig> out;
  for (LossKind k : {LossKind::ce, LossKind::mse, LossKind::mse_margin, LossKind::loss1, LossKind::loss2,
                     LossKind::jacob, LossKind::adv}) {
    LossConfig c;
    c.kind = k;
    out.push_back(c);
  }
  LossConfig strong1;
  strong1.kind = LossKind::loss1;
  strong1.beta1 = 2.0;
  out.push_back(strong1);
  LossConfig strong2;
  strong2.kind = LossKind::loss2;
  strong2.beta2 = 2.0;
  out.push_back(strong2);
  for (LossKind k : {LossKind::loss1, LossKind::loss2}) {
    LossConfig c;
    c.kind = k;
    c.all_classes = true;
    out.push_back(c);
  }
  LossConfig jac;
  jac.kind = LossKind::jacob;
  jac.lambda_jac = 1.0;
  out.push_back(jac);
  return out;
}

inline std::vector<CheckResult> double_backprop_suite(const std::string& arch, std::uint64_t seed) {
  RandStream rng(seed, 103);
  Model<double> m = arch == "cnn" ? toy_cnn(rng) : toy_mlp(rng);
  const std::size_t n = 6;
  const auto x = rand<double>(rng, Uniform{0.05, 0.95}, {n, m.input_dim()});
  const auto y = mostly_correct_labels(m, x);
  std::vector<CheckResult> out;
  for (const auto& cfg : catalog_configs()) out.push_back(fd_gradient(m, x, y, cfg, "toy " + arch));
  return out;
}

/// |wᵀε| ≤ ‖w‖₁‖ε‖_∞ on random pairs, plus equality at ε = ‖ε‖_∞·sign(w).
inline CheckResult holder_fuzz(std::size_t pairs, std::uint64_t seed) {
  CheckResult r;
  r.name = "Hölder bound fuzz";
  RandStream rng(seed, 104);
  std::size_t violations = 0;
  double worst_equality = 0;
  std::vector<double> w, e;
  for (std::size_t p = 0; p < pairs; ++p) {
    const std::size_t d = 1 + rng.below(256);
    const double emax = rng.uniform(0, 1);
    w.resize(d);
    e.resize(d);
    for (auto& v : w) v = rng.normal(0, 1) * std::exp(rng.uniform(-3, 3));
    for (auto& v : e) v = rng.uniform(-emax, emax);
    double dot = 0, l1 = 0, inf = 0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += w[j] * e[j];
      l1 += std::abs(w[j]);
      inf = std::max(inf, std::abs(e[j]));
    }
    if (std::abs(dot) > l1 * inf) ++violations;
    double eq = 0;
    for (std::size_t j = 0; j < d; ++j) eq += w[j] * emax * nsr::detail::sgn(w[j]);
    worst_equality = std::max(worst_equality, std::abs(eq - l1 * emax) / (1 + l1 * emax));
  }
  r.measured = static_cast<double>(violations);
  r.threshold = 0;
  r.passed = violations == 0 && worst_equality < 1e-12;
  r.detail = std::to_string(pairs) + " pairs; equality-case error " + std::to_string(worst_equality);
  return r;
}

/**
 * PGD and SPSA outputs against the ε-ball and data bounds over random radii,
 * step counts, step sizes, losses and inputs that touch the bounds.
 */
template <typename T>
CheckResult attack_containment(std::size_t cases, std::uint64_t seed) {
  CheckResult r;
  r.name = std::string("attack containment ") + dtype_name<T>();
  r.threshold = 0;
  RandStream rng(seed, 105);
  auto m = build_mlp<T>({12, 10, 8, 6, 4});
  m.init_glorot(rng);
  randomize_biases(m, rng);
  const std::size_t batch = 50;
  std::size_t violations = 0, checked = 0;
  double worst = 0;
  for (std::size_t b = 0; checked < 2 * cases; ++b) {
    auto x = rand<T>(rng, Uniform{0, 1}, {batch, 12});
    for (auto& v : x.data()) {
      const double u = rng.uniform01();
      if (u < 0.1) v = T(0);
      else if (u < 0.2) v = T(1);
    }
    std::vector<int> y(batch);
    for (auto& v : y) v = static_cast<int>(rng.below(4));
    const double eps = rng.uniform01() < 0.05 ? 0.0 : rng.uniform(0, 0.6);
    auto check = [&](const Tensor<T>& adv) {
      for (std::size_t s = 0; s < batch; ++s)
        for (std::size_t j = 0; j < 12; ++j) {
          const double a = adv(s, j), o = x(s, j);
          const double dist = std::abs(a - o);
          worst = std::max(worst, dist - eps);
          if (!(dist <= eps + 1e-6) || a < 0 || a > 1) ++violations;
        }
      checked += batch;
    };
    PgdConfig pgd;
    pgd.eps = eps;
    pgd.steps = 1 + static_cast<int>(rng.below(12));
    if (rng.uniform01() < 0.5) pgd.step_size = rng.uniform(1e-3, 1.0);
    pgd.random_start = rng.uniform01() < 0.7;
    pgd.loss = static_cast<AttackLoss>(rng.below(3));
    check(pgd_attack(m, x, y, pgd, rng.derive(2 * b)));
    SpsaConfig spsa;
    spsa.eps = eps;
    spsa.iterations = static_cast<int>(rng.below(4));
    spsa.pairs = 1 + static_cast<int>(rng.below(8));
    spsa.delta = rng.uniform(1e-3, 0.1);
    spsa.lr = rng.uniform(1e-3, 0.5);
    check(spsa_attack(m, x, y, spsa, rng.derive(2 * b + 1)));
  }
  r.measured = static_cast<double>(violations);
  r.passed = violations == 0;
  r.detail = std::to_string(checked) + " attacked samples; worst excess over eps " + std::to_string(worst);
  return r;
}

/// Every nn-graph and loss property for one architecture.
inline std::vector<CheckResult> gradcheck_suite(const std::string& arch, std::uint64_t seed) {
  std::vector<CheckResult> out;
  {
    RandStream rng(seed, 1);
    const auto m = random_model<double>(arch, rng);
    out.push_back(exact_linearity(m, arch, 100, seed));
    out.push_back(exact_linearity(m.template cast<float>(), arch, 100, seed));
    out.push_back(frozen_region(m, arch, 100, seed));
  }
  for (auto& r : double_backprop_suite(arch, seed)) out.push_back(std::move(r));
  out.push_back(holder_fuzz(10000, seed));
  return out;
}

}  // namespace nsr::checks
