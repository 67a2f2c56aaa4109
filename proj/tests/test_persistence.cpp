#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "nsr/checks.hpp"
#include "nsr/persistence.hpp"
#include "oracles.hpp"

using namespace nsr;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

template <typename T>
Model<T> random_cnn(std::uint64_t seed) {
  CnnConfig cfg;
  cfg.input_length = 32;
  cfg.blocks = 2;
  cfg.channels = 3;
  auto m = build_cnn<T>(cfg);
  RandStream rng(seed, 0);
  m.init_glorot(rng);
  checks::randomize_biases(m, rng);
  return m;
}

}  // namespace

TEST(Persistence, Base64RoundTrip) {
  for (std::size_t n = 0; n < 10; ++n) {
    std::vector<std::uint8_t> b(n);
    for (std::size_t i = 0; i < n; ++i) b[i] = static_cast<std::uint8_t>(i * 37 + 250);
    EXPECT_EQ(detail::base64_decode(detail::base64_encode(b)), b);
  }
  EXPECT_EQ(detail::base64_encode({'M', 'a', 'n'}), "TWFu");
  EXPECT_EQ(detail::base64_encode({'M'}), "TQ==");
}

TEST(Persistence, RoundTripIsByteIdentical) {
  const auto dir = oracle::temp_dir("persistence_roundtrip");
  const auto m = random_cnn<float>(1);
  save_model(m, dir / "a.json");
  const auto back = load_model<float>(dir / "a.json");
  EXPECT_EQ(back.layers(), m.layers());
  for (std::size_t p = 0; p < m.params().size(); ++p)
    EXPECT_EQ(back.params()[p].value, m.params()[p].value);
  save_model(back, dir / "b.json");
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));

  RandStream rng(2, 0);
  const auto x = rand<float>(rng, Uniform{0, 1}, {4, 32});
  EXPECT_EQ(predict_logits(m, x), predict_logits(back, x));
}

TEST(Persistence, DoubleModelRoundTrip) {
  const auto dir = oracle::temp_dir("persistence_f64");
  const auto m = random_cnn<double>(3);
  save_model(m, dir / "m.json");
  const auto back = load_model<double>(dir / "m.json");
  for (std::size_t p = 0; p < m.params().size(); ++p)
    EXPECT_EQ(back.params()[p].value, m.params()[p].value);
}

TEST(Persistence, TamperedPayloadFailsChecksum) {
  auto j = model_to_json(random_cnn<float>(4));
  auto& entry = j["params"]["layer0.weight"];
  auto bytes = detail::base64_decode(entry["data"].get<std::string>());
  bytes[5] ^= 0x01;
  entry["data"] = detail::base64_encode(bytes);
  EXPECT_THROW(model_from_json<float>(j), ChecksumError);
}

TEST(Persistence, NewerVersionRejected) {
  auto j = model_to_json(random_cnn<float>(5));
  j["format_version"] = kModelFormatVersion + 1;
  EXPECT_THROW(model_from_json<float>(j), VersionError);
}

TEST(Persistence, MalformedFilesRejected) {
  const auto dir = oracle::temp_dir("persistence_bad");
  std::ofstream(dir / "junk.json") << "{ not json";
  EXPECT_THROW(load_model<float>(dir / "junk.json"), FormatError);
  EXPECT_THROW(load_model<float>(dir / "missing.json"), IoError);

  auto j = model_to_json(random_cnn<float>(6));
  j["params"].erase("layer0.bias");
  EXPECT_THROW(model_from_json<float>(j), FormatError);

  auto k = model_to_json(random_cnn<float>(6));
  k["layers"][0]["kind"] = "attention";
  EXPECT_THROW(model_from_json<float>(k), PersistenceError);

  auto s = model_to_json(random_cnn<float>(6));
  s["params"]["layer0.weight"]["shape"] = Shape{1, 1, 1};
  EXPECT_THROW(model_from_json<float>(s), FormatError);
}

TEST(Persistence, LayerSpecsRoundTrip) {
  for (const auto& l : {LayerSpec::dense(3, 4, false), LayerSpec::relu(), LayerSpec::conv1d(2, 5, 3, 2, 1),
                        LayerSpec::maxpool1d(5, 2), LayerSpec::residual_begin(), LayerSpec::residual_end(),
                        LayerSpec::flatten()})
    EXPECT_EQ(layer_from_json(layer_to_json(l)), l);
}
