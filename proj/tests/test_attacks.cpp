#include <gtest/gtest.h>

#include <cmath>

#include "nsr/attacks.hpp"
#include "nsr/checks.hpp"

using namespace nsr;

namespace {

// Two-class linear model z = W x with W = [[1,-1],[-1,1]].
Model<double> linear_binary() {
  Model<double> m({2}, {LayerSpec::dense(2, 2, false)});
  m.weight(0) = Tensor<double>::matrix({{1, -1}, {-1, 1}});
  return m;
}

// Margin z_0 - z_1 = aᵀx, queried only through forward calls that are counted.
struct LinearOracle {
  std::vector<double> a;
  mutable std::size_t calls = 0;
  mutable std::size_t rows = 0;
  std::size_t input_dim() const { return a.size(); }
  Tensor<double> operator()(const Tensor<double>& x) const {
    ++calls;
    rows += x.dim(0);
    Tensor<double> z({x.dim(0), 2});
    for (std::size_t s = 0; s < x.dim(0); ++s)
      for (std::size_t j = 0; j < a.size(); ++j) z(s, 0) += a[j] * x(s, j);
    return z;
  }
};

}  // namespace

TEST(Attacks, ZeroEpsilonReturnsInput) {
  RandStream rng(1, 0);
  const auto m = checks::toy_mlp(rng);
  const auto x = rand<double>(rng, Uniform{0, 1}, {5, m.input_dim()});
  const std::vector<int> y{0, 1, 2, 0, 1};
  PgdConfig p;
  p.eps = 0;
  EXPECT_EQ(pgd_attack(m, x, y, p, rng), x);
  SpsaConfig s;
  s.eps = 0;
  EXPECT_EQ(spsa_attack(m, x, y, s, rng), x);
  SpsaConfig none;
  none.iterations = 0;
  EXPECT_EQ(spsa_attack(m, x, y, none, rng), x);
}

TEST(Attacks, LinearModelMovesAgainstTrueClass) {
  const auto m = linear_binary();
  const auto x = Tensor<double>::matrix({{0.5, 0.5}});
  PgdConfig p;
  p.eps = 0.1;
  p.steps = 10;
  const auto adv = pgd_attack(m, x, {0}, p, RandStream(2, 0));
  EXPECT_NEAR(adv(0, 0), 0.4, 1e-12);
  EXPECT_NEAR(adv(0, 1), 0.6, 1e-12);
  for (AttackLoss l : {AttackLoss::margin, AttackLoss::mse}) {
    p.loss = l;
    const auto a2 = pgd_attack(m, x, {0}, p, RandStream(2, 0));
    EXPECT_NEAR(a2(0, 0), 0.4, 1e-12) << attack_loss_name(l);
  }
}

TEST(Attacks, SingleStepWithoutRandomStartIsFgsm) {
  RandStream rng(3, 0);
  const auto m = checks::toy_cnn(rng);
  const auto x = rand<double>(rng, Uniform{0.2, 0.8}, {4, m.input_dim()});
  const std::vector<int> y{0, 1, 2, 1};
  PgdConfig p;
  p.eps = 0.05;
  p.steps = 1;
  p.step_size = 0.05;
  p.random_start = false;
  const auto adv = pgd_attack(m, x, y, p, rng);
  const auto fwd = forward(m, x, false);
  const auto g = pullback(m, fwd.masks, ce_batch(fwd.logits, y).grad.dlogits);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(adv[i], x[i] + 0.05 * detail::sgn(g[i]), 1e-15);
}

TEST(Attacks, DefaultStepSize) {
  PgdConfig p;
  p.eps = 0.1;
  p.steps = 20;
  EXPECT_DOUBLE_EQ(p.alpha(), 2.5 * 0.1 / 20);
  p.step_size = 0.3;
  EXPECT_DOUBLE_EQ(p.alpha(), 0.3);
}

TEST(Attacks, InvalidConfigurationsRejected) {
  const auto m = linear_binary();
  const auto x = Tensor<double>::matrix({{0.5, 0.5}});
  PgdConfig p;
  p.steps = 0;
  EXPECT_THROW(pgd_attack(m, x, {0}, p, RandStream()), ArgumentError);
  SpsaConfig s;
  s.delta = 0;
  EXPECT_THROW(spsa_attack(m, x, {0}, s, RandStream()), ArgumentError);
  EXPECT_THROW(pgd_attack(m, Tensor<double>::matrix({{1.5, 0.5}}), {0}, PgdConfig{}, RandStream()), ArgumentError);
  EXPECT_THROW(pgd_attack(m, x, {0, 1}, PgdConfig{}, RandStream()), DimensionError);
  EXPECT_EQ(attack_loss_from_name("margin"), AttackLoss::margin);
  EXPECT_FALSE(attack_loss_from_name("l2"));
}

TEST(Attacks, ReproducibleFromTheStream) {
  RandStream rng(4, 0);
  const auto m = checks::toy_mlp(rng);
  const auto x = rand<double>(rng, Uniform{0, 1}, {6, m.input_dim()});
  const std::vector<int> y{0, 1, 2, 0, 1, 2};
  PgdConfig p;
  p.steps = 5;
  EXPECT_EQ(pgd_attack(m, x, y, p, RandStream(9, 1)), pgd_attack(m, x, y, p, RandStream(9, 1)));
  SpsaConfig s;
  s.iterations = 3;
  s.pairs = 8;
  EXPECT_EQ(spsa_attack(m, x, y, s, RandStream(9, 2)), spsa_attack(m, x, y, s, RandStream(9, 2)));
}

TEST(Attacks, SpsaUsesOnlyForwardQueries) {
  LinearOracle o{{1.0, -1.0, 0.5, 2.0}};
  const Tensor<double> x({3, 4}, 0.5);
  SpsaConfig s;
  s.eps = 0.05;
  s.iterations = 7;
  s.pairs = 16;
  spsa_attack_oracle<double>(o, x, {0, 0, 0}, s, RandStream(5, 0));
  // One clean batch, then per sample and iteration one probe batch and one check.
  EXPECT_EQ(o.calls, 1 + 3 * 7 * 2u);
  EXPECT_EQ(o.rows, 3 + 3 * 7 * (2 * 16 + 1u));
}

TEST(Attacks, SpsaDescendsALinearMargin) {
  // For a linear margin every antithetic difference is exact, so the
  // estimate is unbiased and the attack walks to the box corner.
  LinearOracle o{{1.0, -1.0, 0.5, 2.0}};
  const Tensor<double> x({2, 4}, 0.5);
  SpsaConfig s;
  s.eps = 0.05;
  s.iterations = 40;
  s.pairs = 64;
  const auto adv = spsa_attack_oracle<double>(o, x, {0, 0}, s, RandStream(6, 0));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < 4; ++j)
      EXPECT_NEAR(adv(r, j), 0.5 - 0.05 * detail::sgn(o.a[j]), 1e-9) << r << "," << j;
}

TEST(Attacks, StaysInsideBallAndBounds) {
  const auto f32 = checks::attack_containment<float>(400, 7);
  EXPECT_TRUE(f32.passed) << checks::format(f32);
  const auto f64 = checks::attack_containment<double>(400, 8);
  EXPECT_TRUE(f64.passed) << checks::format(f64);
}

TEST(Attacks, PgdDoesNotRaiseAccuracy) {
  RandStream rng(10, 0);
  const auto m = checks::toy_mlp(rng);
  const auto x = rand<double>(rng, Uniform{0, 1}, {40, m.input_dim()});
  const auto y = argmax_rows(predict_logits(m, x));
  PgdConfig p;
  p.eps = 0.2;
  p.steps = 20;
  const auto adv = pgd_attack(m, x, y, p, rng);
  const auto pred = argmax_rows(predict_logits(m, adv));
  std::size_t still = 0;
  for (std::size_t s = 0; s < y.size(); ++s) still += pred[s] == y[s];
  EXPECT_LT(still, y.size());
}
