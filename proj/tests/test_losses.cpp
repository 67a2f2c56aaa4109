#include <gtest/gtest.h>

#include <cmath>

#include "nsr/checks.hpp"
#include "nsr/losses.hpp"

using namespace nsr;

namespace {

template <typename T>
std::span<const T> sp(const std::vector<T>& v) {
  return v;
}

struct Fixture {
  Model<double> m;
  Tensor<double> x;
  std::vector<int> y;
};

Fixture fixture(std::uint64_t seed, std::size_t n = 12) {
  RandStream rng(seed, 0);
  Fixture f{checks::toy_mlp(rng), {}, {}};
  f.x = rand<double>(rng, Uniform{0.05, 0.95}, {n, f.m.input_dim()});
  f.y = checks::mostly_correct_labels(f.m, f.x);
  return f;
}

LossConfig config(LossKind k) {
  LossConfig c;
  c.kind = k;
  return c;
}

Gradients<double> grads(const Fixture& f, const LossConfig& cfg) {
  return batch_gradients(f.m, f.x, f.y, cfg).grads;
}

}  // namespace

TEST(Losses, FrozenScalarValues) {
  const std::vector<double> z{0.5, 0.5};
  EXPECT_DOUBLE_EQ(mse_onehot(sp(z), 0), 0.5);
  EXPECT_DOUBLE_EQ(margin_loss(sp(z), 0), 1.0);
  const std::vector<double> z2{2, 0};
  EXPECT_NEAR(cross_entropy(sp(z2), 0), 0.1269280110429725, 1e-12);
  const std::vector<double> flat(5, 0.3);
  EXPECT_NEAR(cross_entropy(sp(flat), 3), std::log(5.0), 1e-12);
}

TEST(Losses, MarginExcludesTrueClass) {
  const std::vector<double> z{3, 0, 0};
  EXPECT_DOUBLE_EQ(margin_loss(sp(z), 0), 0.0);
  const std::vector<double> z2{0, 0.5, 0};
  EXPECT_DOUBLE_EQ(margin_loss(sp(z2), 1), 0.5 + 0.5);
}

TEST(Losses, RegularizerValues) {
  const std::vector<double> x{1, 0}, w{0, 1};
  EXPECT_DOUBLE_EQ(*reg_r1(sp(w), sp(x), 1.0), 2.0);
  const std::vector<double> w3{1, -2, 3};
  EXPECT_NEAR(reg_r2(sp(w3), 2.0, 1.0), 3.0, 1e-7);
  EXPECT_NEAR(0.5 * std::log1p(reg_r2(sp(w3), 2.0, 1.0)), 0.6931471805599453, 1e-7);
  const std::vector<double> zero{0, 0};
  EXPECT_FALSE(reg_r1(sp(w), sp(zero), 1.0).has_value());
}

TEST(Losses, LabelsOutOfRangeRejected) {
  const std::vector<double> z{1, 2};
  EXPECT_THROW(mse_onehot(sp(z), 2), ArgumentError);
  EXPECT_THROW(cross_entropy(sp(z), -1), ArgumentError);
  EXPECT_THROW(ce_batch(Tensor<double>({2, 2}), {0}), Error);
}

TEST(Losses, KindNamesRoundTrip) {
  for (const auto& c : checks::catalog_configs())
    EXPECT_EQ(loss_kind_from_name(loss_kind_name(c.kind)), c.kind);
  EXPECT_FALSE(loss_kind_from_name("hinge"));
  LossConfig a = config(LossKind::adv);
  a.adv_eps = 0.2;
  EXPECT_EQ(a.method_name(), "adv0.2");
  EXPECT_EQ(config(LossKind::mse_margin).method_name(), loss_kind_name(LossKind::mse_margin));
}

TEST(Losses, NegativeHyperparametersRejected) {
  LossConfig c = config(LossKind::loss1);
  c.beta1 = -1;
  EXPECT_THROW(c.validate(), ArgumentError);
  LossConfig a = config(LossKind::adv);
  a.adv_steps = 0;
  EXPECT_THROW(a.validate(), ArgumentError);
}

TEST(Losses, GatingPartitionsTheBatch) {
  const auto f = fixture(1);
  const auto fwd = forward(f.m, f.x);
  std::size_t expected = 0;
  for (std::size_t s = 0; s < f.y.size(); ++s) expected += argmax_rows(fwd.logits)[s] == f.y[s];
  ASSERT_GT(expected, 0u);
  ASSERT_LT(expected, f.y.size());
  for (LossKind k : {LossKind::mse_margin, LossKind::loss1, LossKind::loss2})
    EXPECT_EQ(evaluate_loss(f.m, fwd, f.x, f.y, config(k)).correct, expected) << loss_kind_name(k);

  // A batch where nothing is correct reduces to plain MSE.
  std::vector<int> wrong = argmax_rows(fwd.logits);
  for (auto& v : wrong) v = (v + 1) % 3;
  const double mse = mse_batch(fwd.logits, wrong).value();
  for (LossKind k : {LossKind::mse_margin, LossKind::loss1, LossKind::loss2}) {
    const auto e = evaluate_loss(f.m, fwd, f.x, wrong, config(k));
    EXPECT_EQ(e.correct, 0u);
    EXPECT_DOUBLE_EQ(e.value(), mse);
  }
}

TEST(Losses, ZeroBetaReducesToMseMargin) {
  const auto f = fixture(2);
  const auto base = grads(f, config(LossKind::mse_margin));
  for (LossKind k : {LossKind::loss1, LossKind::loss2})
    for (bool all : {false, true}) {
      LossConfig c = config(k);
      c.beta1 = c.beta2 = 0;
      c.all_classes = all;
      const auto fwd = forward(f.m, f.x);
      EXPECT_DOUBLE_EQ(evaluate_loss(f.m, fwd, f.x, f.y, c).value(),
                       mse_margin_batch(fwd.logits, f.y).value());
      const auto g = grads(f, c);
      for (std::size_t p = 0; p < g.size(); ++p)
        for (std::size_t i = 0; i < g[p].size(); ++i) ASSERT_NEAR(g[p][i], base[p][i], 1e-15);
    }
}

TEST(Losses, NonNegativeAndMonotoneInStrength) {
  for (std::uint64_t seed = 3; seed < 8; ++seed) {
    const auto f = fixture(seed);
    const auto fwd = forward(f.m, f.x);
    for (const auto& c : checks::catalog_configs())
      EXPECT_GE(evaluate_loss(f.m, fwd, f.x, f.y, c).value(), 0.0) << c.method_name();
    for (LossKind k : {LossKind::loss1, LossKind::loss2, LossKind::jacob}) {
      double prev = -1;
      for (double b : {0.0, 0.1, 0.5, 1.0, 4.0}) {
        LossConfig c = config(k);
        c.beta1 = c.beta2 = c.lambda_jac = b;
        const double v = evaluate_loss(f.m, fwd, f.x, f.y, c).value();
        EXPECT_GE(v, prev) << loss_kind_name(k) << " strength " << b;
        prev = v;
      }
    }
  }
}

TEST(Losses, JacobianWithZeroLambdaIsCrossEntropy) {
  const auto f = fixture(9);
  LossConfig c = config(LossKind::jacob);
  c.lambda_jac = 0;
  const auto a = grads(f, c), b = grads(f, config(LossKind::ce));
  for (std::size_t p = 0; p < a.size(); ++p) EXPECT_EQ(a[p].values(), b[p].values());
}

TEST(Losses, AdvLossOnCleanCopyIsCrossEntropy) {
  const auto f = fixture(10);
  EXPECT_NEAR(adv_loss(f.m, f.x, f.x, f.y), ce_batch(predict_logits(f.m, f.x), f.y).value(), 1e-15);
  EXPECT_THROW(adv_loss(f.m, f.x, Tensor<double>({1, f.m.input_dim()}), f.y), ArgumentError);
}

TEST(Losses, LogitGradientsMatchFiniteDifferences) {
  RandStream rng(11, 0);
  const auto z = rand<double>(rng, Uniform{-2, 2}, {4, 5});
  const std::vector<int> y{0, 3, 4, 1};
  for (int which = 0; which < 3; ++which) {
    auto eval = [&](const Tensor<double>& t) {
      return which == 0 ? ce_batch(t, y) : which == 1 ? mse_batch(t, y) : mse_margin_batch(t, y);
    };
    const auto g = eval(z).grad.dlogits;
    for (std::size_t i = 0; i < z.size(); ++i) {
      Tensor<double> p = z, m = z;
      p[i] += 1e-6;
      m[i] -= 1e-6;
      EXPECT_NEAR(g[i], (eval(p).value() - eval(m).value()) / 2e-6, 1e-6) << which << " " << i;
    }
  }
}

TEST(Losses, GatedSampleWithoutRowsIsAContractError) {
  const auto f = fixture(12);
  const auto fwd = forward(f.m, f.x);
  EXPECT_THROW(loss1_batch(fwd.logits, EffectiveBatch<double>{}, f.x, f.y, config(LossKind::loss1)),
               ContractError);
}

TEST(Losses, EveryCatalogGradientMatchesFiniteDifferences) {
  for (const auto& r : checks::double_backprop_suite("mlp", 5)) EXPECT_TRUE(r.passed) << checks::format(r);
}
