#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "nsr/checks.hpp"
#include "nsr/report.hpp"
#include "oracles.hpp"
#include "synthetic.hpp"

using namespace nsr;

namespace {

std::vector<std::string> lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

Model<float> trained_mlp() {
  const auto data = synthetic::beats(30, 16, 5, 1);
  auto m = build_mlp<float>({16, 12, 5});
  RandStream rng(1, 4);
  m.init_glorot(rng);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 16;
  cfg.optimizer.lr = 0.02;
  return train(m, data, nullptr, cfg).final_model;
}

RobustnessReport fake_report(const std::string& method, double drop) {
  RobustnessReport r;
  r.arch = "mlp";
  r.method = method;
  r.attack = "pgd20";
  r.seed = 3;
  for (double e : kDefaultEpsGrid) r.rows.push_back({e, 0.9 - drop * e, 0.8 - drop * e, 100});
  return r;
}

}  // namespace

TEST(Metrics, AccuracyAndMacroPrecision) {
  const auto m = metrics({0, 0}, {0, 1}, 2);
  EXPECT_DOUBLE_EQ(m.acc, 0.5);
  EXPECT_DOUBLE_EQ(m.prec, 0.25);
  const auto p = metrics({0, 1, 1, 2}, {0, 1, 2, 2}, 3);
  EXPECT_DOUBLE_EQ(p.acc, 0.75);
  EXPECT_DOUBLE_EQ(p.prec, (1 + 0.5 + 1) / 3.0);
  EXPECT_THROW(metrics({}, {}, 2), ArgumentError);
  EXPECT_THROW(metrics({0}, {0, 1}, 2), ArgumentError);
  EXPECT_THROW(metrics({2}, {0}, 2), ArgumentError);
}

TEST(Curve, CleanAnchorAndReproducibility) {
  const auto m = trained_mlp();
  const auto test = synthetic::beats(12, 16, 5, 2);
  CurveOptions opt;
  opt.seed = 5;
  opt.chunk = 16;
  const std::vector<double> eps{0, 0.05, 0.2};
  const auto a = robustness_curve(m, pgd_spec(10), eps, test, opt);
  const auto clean = evaluate_clean(m, test);
  EXPECT_EQ(a.rows[0].acc, clean.acc);
  EXPECT_EQ(a.rows[0].prec, clean.prec);
  EXPECT_LE(a.rows[2].acc, a.rows[0].acc);
  EXPECT_EQ(a.rows[1].n, test.size());

  opt.threads = 3;
  const auto b = robustness_curve(m, pgd_spec(10), eps, test, opt);
  for (std::size_t i = 0; i < eps.size(); ++i) {
    EXPECT_EQ(a.rows[i].acc, b.rows[i].acc);
    EXPECT_EQ(a.rows[i].prec, b.rows[i].prec);
  }
  EXPECT_EQ(a.config_digest, pgd_spec(10).digest());
  EXPECT_NE(pgd_spec(10).digest(), pgd_spec(20).digest());

  SpsaSpec small;
  small.iterations = 3;
  small.pairs = 8;
  const auto s1 = robustness_curve(m, spsa_spec(small), eps, test, opt);
  const auto s2 = robustness_curve(m, spsa_spec(small), eps, test, opt);
  for (std::size_t i = 0; i < eps.size(); ++i) EXPECT_EQ(s1.rows[i].acc, s2.rows[i].acc);
}

TEST(Curve, EpsilonListValidated) {
  const auto m = trained_mlp();
  const auto test = synthetic::beats(2, 16, 5, 2);
  EXPECT_THROW(robustness_curve(m, pgd_spec(5), {0.1, 0.2}, test), ArgumentError);
  EXPECT_THROW(robustness_curve(m, pgd_spec(5), {0, 0.2, 0.1}, test), ArgumentError);
  EXPECT_THROW(robustness_curve(m, pgd_spec(5), {0}, HeartbeatSet{}), ArgumentError);
}

TEST(Alignment, ParallelAndOrthogonalCases) {
  Model<double> par({2}, {LayerSpec::dense(2, 2, false)});
  par.weight(0) = Tensor<double>::matrix({{1, 1}, {1, -1}});
  HeartbeatSet s;
  s.signals = Tensor<float>({2, 2}, {0.5f, 0.5f, 0.1f, 0.9f});
  s.labels = {0, 0};  // the second row is predicted as class 0 too: z = (1, -0.8)
  auto st = alignment_diagnostic(par, s);
  EXPECT_EQ(st.total, 2u);
  EXPECT_NEAR(st.per_class[0], (1.0 + (0.1 + 0.9) / std::sqrt(2 * 0.82)) / 2, 1e-6);

  Model<double> orth({2}, {LayerSpec::dense(2, 2, false)});
  orth.weight(0) = Tensor<double>::matrix({{0, 1}, {-1, -1}});
  HeartbeatSet o;
  o.signals = Tensor<float>({2, 2}, {1.0f, 0.0f, 1.0f, 0.0f});
  o.labels = {0, 1};  // the second row is misclassified and ignored
  st = alignment_diagnostic(orth, o);
  EXPECT_EQ(st.total, 1u);
  EXPECT_EQ(st.counts[1], 0u);
  EXPECT_DOUBLE_EQ(st.overall, 0.0);

  HeartbeatSet one;
  one.signals = Tensor<float>({1, 2}, {0.5f, 0.5f});
  one.labels = {0};
  EXPECT_DOUBLE_EQ(alignment_diagnostic(par, one).overall, 1.0);
  bool degenerate = false;
  const std::vector<double> z{0, 0}, a{1, 2};
  cosine(z, a, degenerate);
  EXPECT_TRUE(degenerate);
}

TEST(Emit, EmptyInputWritesNothing) {
  const auto dir = oracle::temp_dir("emit_empty") / "out";
  EXPECT_TRUE(emit_report({}, dir).empty());
  EXPECT_FALSE(std::filesystem::exists(dir));
}

TEST(Emit, FilesAndComparisonShape) {
  const auto dir = oracle::temp_dir("emit_two");
  const auto written = emit_report({fake_report("ce", 1.0), fake_report("loss2", 0.5)}, dir);
  EXPECT_EQ(written.size(), 9u);
  for (const char* f : {"mlp_ce_pgd20.csv", "mlp_ce_pgd20.json", "mlp_ce_pgd20.svg", "mlp_loss2_pgd20.csv",
                        "mlp_pgd20_comparison.csv", "mlp_pgd20_ACC.svg", "mlp_pgd20_PREC.svg"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  const auto cmp = lines(dir / "mlp_pgd20_comparison.csv");
  ASSERT_EQ(cmp.size(), 9u);
  EXPECT_EQ(cmp[0], "eps,ACC_ce,PREC_ce,ACC_loss2,PREC_loss2");
  for (std::size_t i = 1; i < cmp.size(); ++i)
    EXPECT_EQ(std::count(cmp[i].begin(), cmp[i].end(), ','), 4) << cmp[i];
  std::string svg;
  for (const auto& l : lines(dir / "mlp_pgd20_ACC.svg")) svg += l;
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_NE(svg.find("loss2"), std::string::npos);
  EXPECT_EQ(svg.substr(svg.size() - 6), "</svg>");
}

TEST(Emit, ReportReadsBack) {
  const auto dir = oracle::temp_dir("emit_read");
  const auto r = fake_report("adv0.1", 0.7);
  write_report(r, dir);
  const auto back = read_report(dir / "mlp_adv0.1_pgd20.csv");
  EXPECT_EQ(back.method, "adv0.1");
  EXPECT_EQ(back.seed, 3u);
  ASSERT_EQ(back.rows.size(), r.rows.size());
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    EXPECT_EQ(back.rows[i].eps, r.rows[i].eps);
    EXPECT_EQ(back.rows[i].acc, r.rows[i].acc);
  }
  std::ofstream(dir / "junk.csv") << "eps,ACC,PREC,n\n";
  EXPECT_THROW(read_report(dir / "junk.csv"), FormatError);
  RobustnessReport bad = r;
  bad.rows[1].acc = 1.5;
  EXPECT_THROW(write_report(bad, dir), ArgumentError);
}

TEST(Waveforms, PanelStaysInBallAndRoundTrips) {
  const auto m = trained_mlp();
  const auto test = synthetic::beats(1, 16, 5, 4);
  auto p = waveform_panel(m, pgd_spec(10), {0, 0.05, 0.1}, test.signals.row(2), test.labels[2], 7);
  p.arch = "mlp";
  p.method = "ce";
  ASSERT_EQ(p.signals.size(), 3u);
  for (std::size_t j = 0; j < 16; ++j) {
    EXPECT_EQ(p.signals[0][j], test.signals(2, j));
    EXPECT_LE(std::abs(p.signals[2][j] - test.signals(2, j)), 0.1 + 1e-6);
  }
  const auto dir = oracle::temp_dir("waveforms");
  detail::write_text(dir / (p.stem() + "_waveforms.csv"), waveform_csv(p));
  const auto back = read_waveform_csv(dir / "mlp_ce_pgd10_waveforms.csv");
  EXPECT_EQ(back.attack, "pgd10");
  EXPECT_EQ(back.label, 2);
  EXPECT_EQ(back.signals, p.signals);
  const auto written = emit_report({}, dir / "out", {p});
  ASSERT_EQ(written.size(), 1u);
  EXPECT_EQ(written[0].filename(), "mlp_ce_pgd10_waveforms.svg");
}
