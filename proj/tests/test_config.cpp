#include <gtest/gtest.h>

#include <fstream>

#include "nsr/config.hpp"
#include "oracles.hpp"

using namespace nsr;
using nlohmann::json;

namespace {

void leaves(const json& j, const std::string& prefix, std::vector<std::string>& out) {
  if (!j.is_object()) {
    out.push_back(prefix);
    return;
  }
  for (auto it = j.begin(); it != j.end(); ++it) leaves(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
}

std::string error_of(const json& j) {
  try {
    run_config_from_json(j);
  } catch (const ArgumentError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, DefaultsRoundTrip) {
  const RunConfig d;
  EXPECT_EQ(to_json(run_config_from_json(to_json(d))), to_json(d));
  EXPECT_EQ(to_json(run_config_from_json(json::object())), to_json(d));
  EXPECT_EQ(d.attacks.size(), 3u);
  EXPECT_EQ(d.attacks[2].per_class, 162u);
  EXPECT_EQ(d.eps_grid, kDefaultEpsGrid);
  EXPECT_EQ(d.train.epochs, 50);
  EXPECT_EQ(d.train.batch_size, 128u);
  EXPECT_DOUBLE_EQ(d.train.optimizer.lr, 0.001);
}

TEST(Config, UnknownKeysNamePath) {
  EXPECT_NE(error_of({{"sed", 1}}).find("'sed'"), std::string::npos);
  EXPECT_NE(error_of({{"loss", {{"beta3", 1}}}}).find("'loss.beta3'"), std::string::npos);
  EXPECT_NE(error_of({{"model", {{"cnn", {{"depth", 3}}}}}}).find("'model.cnn.depth'"), std::string::npos);
  EXPECT_NE(error_of({{"attacks", {{{"method", "pgd"}, {"stepz", 3}}}}}).find("attacks[0].stepz"), std::string::npos);
}

TEST(Config, BadValuesRejected) {
  EXPECT_NE(error_of({{"train", {{"epochs", "ten"}}}}).find("train.epochs"), std::string::npos);
  EXPECT_FALSE(error_of({{"loss", {{"kind", "hinge"}}}}).empty());
  EXPECT_FALSE(error_of({{"model", {{"arch", "rnn"}}}}).empty());
  EXPECT_FALSE(error_of({{"eps_grid", {0.1, 0.2}}}).empty());
  EXPECT_FALSE(error_of({{"attacks", {{{"method", "fgsm"}}}}}).empty());
  EXPECT_FALSE(error_of({{"attacks", {{{"method", "pgd"}, {"id", "pgd_x"}}}}}).empty());
  EXPECT_FALSE(error_of({{"attacks", {{{"method", "spsa"}, {"pairs", 0}}}}}).empty());
  EXPECT_FALSE(error_of({{"sweep", {{"param", "gamma"}}}}).empty());
  EXPECT_FALSE(error_of(json::array()).empty());
}

TEST(Config, OverridesApply) {
  const auto c = run_config_from_json(json::parse(R"({
    "model": {"arch": "cnn", "dtype": "f64", "cnn": {"blocks": 2}},
    "loss": {"kind": "loss2", "beta2": 0.7},
    "attacks": [{"method": "pgd", "steps": 7, "step_size": 0.01, "loss": "margin", "per_class": 3},
                {"method": "spsa", "id": "spsaQuick", "iterations": 5}],
    "seed": 9, "sweep": {"values": [0.1, 0.2]}
  })"));
  EXPECT_EQ(c.arch, "cnn");
  EXPECT_EQ(c.cnn.blocks, 2u);
  EXPECT_EQ(c.train.loss.kind, LossKind::loss2);
  EXPECT_DOUBLE_EQ(c.train.loss.beta2, 0.7);
  ASSERT_EQ(c.attacks.size(), 2u);
  EXPECT_EQ(c.attacks[0].spec.id, "pgd7");
  EXPECT_EQ(c.attacks[0].per_class, 3u);
  EXPECT_EQ(std::get<PgdSpec>(c.attacks[0].spec.kind).loss, AttackLoss::margin);
  EXPECT_EQ(c.attacks[1].spec.id, "spsaQuick");
  EXPECT_EQ(std::get<SpsaSpec>(c.attacks[1].spec.kind).iterations, 5);
  EXPECT_EQ(c.seed(), 9u);
  EXPECT_EQ(build_model<double>(c).input_shape(), (Shape{1, 187}));
}

TEST(Config, HelpListsEveryKey) {
  const auto help = config_help();
  std::vector<std::string> keys;
  leaves(to_json(RunConfig{}), "", keys);
  for (const auto& k : keys) EXPECT_NE(help.find("  " + k + " = "), std::string::npos) << k;
  EXPECT_EQ(keys.size(), detail::config_keys().size());
}

TEST(Config, FileWithComments) {
  const auto dir = oracle::temp_dir("config_file");
  std::ofstream(dir / "run.json") << "{\n  // five epochs\n  \"train\": {\"epochs\": 5}\n}\n";
  EXPECT_EQ(load_run_config(dir / "run.json").train.epochs, 5);
  std::ofstream(dir / "bad.json") << "{ \"train\": ";
  EXPECT_THROW(load_run_config(dir / "bad.json"), ArgumentError);
  EXPECT_THROW(load_run_config(dir / "none.json"), IoError);
}

TEST(Config, DigestTracksContent) {
  RunConfig a, b;
  EXPECT_EQ(config_digest(a), config_digest(b));
  b.train.seed = 1;
  EXPECT_NE(config_digest(a), config_digest(b));
}
