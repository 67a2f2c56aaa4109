#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "nsr/data.hpp"
#include "oracles.hpp"

using namespace nsr;

namespace {

void write(const std::filesystem::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

// Row i holds the single amplitude i / n, so rows are identifiable after shuffles.
HeartbeatSet indexed_set(std::size_t n, const std::vector<int>& labels) {
  HeartbeatSet s;
  std::vector<float> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<float>(i) / static_cast<float>(n);
  s.signals = Tensor<float>({n, 1}, std::move(v));
  s.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) s.labels[i] = labels[i % labels.size()];
  s.digest = content_digest(s);
  return s;
}

std::multiset<float> values(const HeartbeatSet& s) { return {s.signals.data().begin(), s.signals.data().end()}; }

}  // namespace

TEST(Data, BadLabelRowIsRejectedAndNamed) {
  const auto dir = oracle::temp_dir("data_bad_label");
  write(dir / "two.csv", "0.1,0.2,0.3,1.0\n0.1,0.2,0.3,7.0\n");
  const auto r = ingest_heartbeat_csv(dir / "two.csv", 3);
  EXPECT_EQ(r.set.size(), 1u);
  ASSERT_EQ(r.rejected.size(), 1u);
  EXPECT_EQ(r.rejected[0].row, 2u);
  try {
    load_heartbeat_csv(dir / "two.csv", 3);
    FAIL();
  } catch (const IngestionError& e) {
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos) << e.what();
  }
}

TEST(Data, RowViolations) {
  const auto dir = oracle::temp_dir("data_rows");
  write(dir / "rows.csv",
        "0.1,0.2,0.3,0\n"   // ok
        "0.1,0.2,0\n"       // too few columns
        "0.1,abc,0.3,0\n"   // unparsable
        "0.1,0.2,0.3,1.5\n" // fractional label
        "0.1,0.2,1.2,0\n"   // amplitude out of range
        "\n"                // blank lines are skipped
        "0.1,0.2,0.3,4.0\r\n");
  const auto r = ingest_heartbeat_csv(dir / "rows.csv", 3);
  EXPECT_EQ(r.set.labels, (std::vector<int>{0, 4}));
  std::vector<std::size_t> rows;
  for (const auto& i : r.rejected) rows.push_back(i.row);
  EXPECT_EQ(rows, (std::vector<std::size_t>{2, 3, 4, 5}));
  EXPECT_THROW(ingest_heartbeat_csv(dir / "missing.csv"), IoError);
}

TEST(Data, TinyOvershootIsClamped) {
  const auto dir = oracle::temp_dir("data_clamp");
  write(dir / "c.csv", "-5e-7,1.0000005,0.5,2\n-1e-3,0.5,0.5,2\n");
  const auto r = ingest_heartbeat_csv(dir / "c.csv", 3);
  ASSERT_EQ(r.set.size(), 1u);
  EXPECT_EQ(r.set.signals(0, 0), 0.0f);
  EXPECT_EQ(r.set.signals(0, 1), 1.0f);
  EXPECT_EQ(r.rejected.size(), 1u);
}

TEST(Data, WriteLoadRoundTripIsStable) {
  const auto dir = oracle::temp_dir("data_roundtrip");
  RandStream rng(1, 0);
  HeartbeatSet s;
  s.signals = rand<float>(rng, Uniform{0, 1}, {20, 7});
  for (int i = 0; i < 20; ++i) s.labels.push_back(i % 5);
  write_heartbeat_csv(s, dir / "a.csv");
  const auto back = load_heartbeat_csv(dir / "a.csv", 7);
  EXPECT_EQ(back.signals, s.signals);
  EXPECT_EQ(back.labels, s.labels);
  write_heartbeat_csv(back, dir / "b.csv");
  const auto again = load_heartbeat_csv(dir / "b.csv", 7);
  EXPECT_EQ(again.digest, back.digest);
  EXPECT_EQ(content_digest(again), content_digest(back));
}

TEST(Data, SplitCountsAtFullScale) {
  const auto s = indexed_set(87554, {0, 1, 2, 3, 4});
  const auto [train, val] = split_train_val(s, 0.8, 42);
  EXPECT_EQ(train.size(), 70043u);
  EXPECT_EQ(val.size(), 17511u);
  auto all = values(train);
  const auto v = values(val);
  all.insert(v.begin(), v.end());
  EXPECT_EQ(all, values(s));
}

TEST(Data, SplitIsSeededAndDisjoint) {
  const auto s = indexed_set(10, {0, 1});
  const auto [a, b] = split_train_val(s, 0.5, 7);
  EXPECT_EQ(a.size(), 5u);
  EXPECT_EQ(b.size(), 5u);
  for (float v : a.signals.data()) EXPECT_EQ(values(b).count(v), 0u);
  const auto [a2, b2] = split_train_val(s, 0.5, 7);
  EXPECT_EQ(a2.signals, a.signals);
  const auto [a3, b3] = split_train_val(s, 0.5, 8);
  EXPECT_NE(a3.signals, a.signals);
  EXPECT_THROW(split_train_val(s, 1.0, 1), ArgumentError);
  EXPECT_THROW(split_train_val(HeartbeatSet{}, 0.5, 1), ArgumentError);
}

TEST(Data, UpsamplingBalancesAndKeepsOriginals) {
  std::vector<int> labels(110, 0);
  for (std::size_t i = 100; i < 110; ++i) labels[i] = 1;
  auto s = indexed_set(110, {0});
  s.labels = labels;
  const auto b = upsample_balance(s, 3, 2);
  EXPECT_EQ(b.class_counts(2), (std::vector<std::size_t>{100, 100}));
  const auto got = values(b);
  for (float v : s.signals.data()) EXPECT_GE(got.count(v), 1u);
  for (std::size_t r = 0; r < b.size(); ++r) {
    const auto src = static_cast<std::size_t>(std::lround(b.signals(r, 0) * 110));
    EXPECT_EQ(b.labels[r], labels[src]);
  }
  EXPECT_EQ(upsample_balance(s, 3, 2).signals, b.signals);
  EXPECT_THROW(upsample_balance(s, 3, 3), ArgumentError);
}

TEST(Data, FirstPerClassKeepsFileOrder) {
  const auto s = indexed_set(12, {0, 1, 2});
  const auto f = first_per_class(s, 2, 3);
  EXPECT_EQ(f.labels, (std::vector<int>{0, 1, 2, 0, 1, 2}));
  EXPECT_EQ(f.signals(3, 0), s.signals(3, 0));
}

TEST(Data, BatchesCoverEpochOnce) {
  const auto s = indexed_set(10, {0, 1, 2});
  BatchIterator<double> it(s, 4, 5, 1);
  EXPECT_EQ(it.batch_count(), 3u);
  Batch<double> b;
  std::vector<std::size_t> sizes, seen;
  while (it.next(b)) {
    sizes.push_back(b.y.size());
    seen.insert(seen.end(), b.rows.begin(), b.rows.end());
    for (std::size_t i = 0; i < b.rows.size(); ++i) {
      EXPECT_EQ(b.y[i], s.labels[b.rows[i]]);
      EXPECT_EQ(b.x(i, 0), static_cast<double>(s.signals(b.rows[i], 0)));
    }
  }
  EXPECT_EQ(sizes, (std::vector<std::size_t>{4, 4, 2}));
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(seen[i], i);
  EXPECT_EQ(BatchIterator<double>(s, 4, 5, 1).order(), it.order());
  EXPECT_NE(BatchIterator<double>(s, 4, 5, 2).order(), it.order());
  EXPECT_THROW(BatchIterator<double>(s, 0, 5, 1), ArgumentError);
}
