#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "nsr/errors.hpp"
#include "nsr/random.hpp"
#include "nsr/tensor.hpp"

namespace nsr {

inline constexpr std::size_t kBeatLength = 187;
inline constexpr std::size_t kBeatClasses = 5;
inline constexpr const char* kBeatClassNames[kBeatClasses] = {"N", "S", "V", "F", "Q"};

/// Pre-segmented heartbeats with amplitudes in [0, 1] and labels 0..4 (N, S, V, F, Q).
struct HeartbeatSet {
  Tensor<float> signals;     // [N, length]
  std::vector<int> labels;
  std::string digest;        // of the source bytes, or of the content for derived sets

  std::size_t size() const { return labels.size(); }
  std::size_t length() const { return signals.rank() == 2 ? signals.dim(1) : 0; }

  std::vector<std::size_t> class_counts(std::size_t classes = kBeatClasses) const {
    std::vector<std::size_t> c(classes, 0);
    for (int y : labels) ++c.at(static_cast<std::size_t>(y));
    return c;
  }
};

inline std::string crc_hex(std::uint32_t crc) {
  std::ostringstream out;
  out << std::hex << std::setw(8) << std::setfill('0') << crc;
  return out.str();
}

inline std::string digest_bytes(std::string_view bytes) {
  return crc_hex(static_cast<std::uint32_t>(
      ::crc32(0, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()))));
}

/// Digest of the in-memory content (labels then raw float bits).
inline std::string content_digest(const HeartbeatSet& set) {
  uLong crc = 0;
  crc = ::crc32(crc, reinterpret_cast<const Bytef*>(set.labels.data()),
                static_cast<uInt>(set.labels.size() * sizeof(int)));
  crc = ::crc32(crc, reinterpret_cast<const Bytef*>(set.signals.data().data()),
                static_cast<uInt>(set.signals.size() * sizeof(float)));
  return crc_hex(static_cast<std::uint32_t>(crc));
}

/// Rows [rows] of `set`, in the given order.
inline HeartbeatSet subset(const HeartbeatSet& set, const std::vector<std::size_t>& rows) {
  const std::size_t len = set.length();
  std::vector<float> data;
  data.reserve(rows.size() * len);
  HeartbeatSet out;
  out.labels.reserve(rows.size());
  for (auto r : rows) {
    auto src = set.signals.row(r);
    data.insert(data.end(), src.begin(), src.end());
    out.labels.push_back(set.labels[r]);
  }
  out.signals = Tensor<float>({rows.size(), len}, std::move(data));
  out.digest = content_digest(out);
  return out;
}

struct RowIssue {
  std::size_t row = 0;  // 1-based line number
  std::string reason;
};

struct IngestResult {
  HeartbeatSet set;
  std::vector<RowIssue> rejected;
};

/**
 * Parses the heartbeat CSV: no header, `length` amplitudes then an
 * integer-valued label per row. Amplitudes outside [0, 1] by at most 1e-6 are
 * clamped; every other violation rejects the row.
 */
inline IngestResult ingest_heartbeat_csv(const std::filesystem::path& path,
                                         std::size_t length = kBeatLength,
                                         std::size_t classes = kBeatClasses) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read heartbeat file " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  IngestResult r;
  std::vector<float> values;
  std::vector<double> row;
  row.reserve(length + 1);
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    std::size_t end = bytes.find('\n', pos);
    if (end == std::string::npos) end = bytes.size();
    std::string_view line(bytes.data() + pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;

    row.clear();
    std::string reason;
    std::size_t start = 0;
    while (start <= line.size()) {
      std::size_t comma = line.find(',', start);
      if (comma == std::string_view::npos) comma = line.size();
      std::string_view field = line.substr(start, comma - start);
      while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
      while (!field.empty() && field.back() == ' ') field.remove_suffix(1);
      double v = 0;
      auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
      if (ec != std::errc() || ptr != field.data() + field.size() || field.empty() || !std::isfinite(v)) {
        reason = "unparsable value '" + std::string(field) + "' in column " + std::to_string(row.size() + 1);
        break;
      }
      row.push_back(v);
      start = comma + 1;
    }
    if (reason.empty() && row.size() != length + 1)
      reason = "expected " + std::to_string(length + 1) + " columns, found " + std::to_string(row.size());
    if (reason.empty()) {
      const double label = row.back();
      if (label != std::floor(label) || label < 0 || label >= static_cast<double>(classes))
        reason = "label " + std::to_string(label) + " not in {0.." + std::to_string(classes - 1) + "}";
    }
    if (reason.empty()) {
      for (std::size_t j = 0; j < length; ++j) {
        double& v = row[j];
        if (v < 0.0 && v >= -1e-6) v = 0.0;
        if (v > 1.0 && v <= 1.0 + 1e-6) v = 1.0;
        if (v < 0.0 || v > 1.0) {
          reason = "amplitude " + std::to_string(v) + " outside [0, 1] in column " + std::to_string(j + 1);
          break;
        }
      }
    }
    if (!reason.empty()) {
      r.rejected.push_back({line_no, reason});
      continue;
    }
    for (std::size_t j = 0; j < length; ++j) values.push_back(static_cast<float>(row[j]));
    r.set.labels.push_back(static_cast<int>(row.back()));
  }
  r.set.signals = Tensor<float>({r.set.labels.size(), length}, std::move(values));
  r.set.digest = digest_bytes(bytes);
  return r;
}

/// Strict loader: any rejected row is an IngestionError listing the first ten.
inline HeartbeatSet load_heartbeat_csv(const std::filesystem::path& path,
                                       std::size_t length = kBeatLength,
                                       std::size_t classes = kBeatClasses) {
  auto r = ingest_heartbeat_csv(path, length, classes);
  if (!r.rejected.empty()) {
    std::ostringstream msg;
    msg << path.string() << ": " << r.rejected.size() << " invalid row(s):";
    for (std::size_t i = 0; i < std::min<std::size_t>(10, r.rejected.size()); ++i)
      msg << " [row " << r.rejected[i].row << ": " << r.rejected[i].reason << "]";
    throw IngestionError(msg.str());
  }
  return std::move(r.set);
}

inline void write_heartbeat_csv(const HeartbeatSet& set, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write heartbeat file " + path.string());
  char buf[64];
  std::string line;
  for (std::size_t r = 0; r < set.size(); ++r) {
    line.clear();
    for (float v : set.signals.row(r)) {
      auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
      line.append(buf, p);
      line += ',';
    }
    line += std::to_string(set.labels[r]);
    line += ".0\n";
    out << line;
  }
  if (!out) throw IoError("failed writing heartbeat file " + path.string());
}

/// Fisher-Yates permutation of [0, n).
inline std::vector<std::size_t> shuffled_indices(std::size_t n, RandStream rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

namespace stream_ids {
inline constexpr std::uint64_t split = 1;
inline constexpr std::uint64_t balance = 2;
inline constexpr std::uint64_t batches = 3;
}  // namespace stream_ids

/// Seeded shuffle, then the first round(fraction·N) rows go to train.
inline std::pair<HeartbeatSet, HeartbeatSet> split_train_val(const HeartbeatSet& set, double fraction,
                                                             std::uint64_t seed) {
  if (!(fraction > 0 && fraction < 1)) throw ArgumentError("split fraction must be in (0, 1)");
  if (set.size() == 0) throw ArgumentError("cannot split an empty set");
  const auto idx = shuffled_indices(set.size(), RandStream(seed, stream_ids::split));
  const auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(set.size())));
  std::vector<std::size_t> a(idx.begin(), idx.begin() + n_train), b(idx.begin() + n_train, idx.end());
  return {subset(set, a), subset(set, b)};
}

/**
 * Keeps every row and adds rows drawn with replacement from each minority
 * class until all classes match the largest; the result is shuffled.
 */
inline HeartbeatSet upsample_balance(const HeartbeatSet& set, std::uint64_t seed,
                                     std::size_t classes = kBeatClasses) {
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t r = 0; r < set.size(); ++r) by_class.at(static_cast<std::size_t>(set.labels[r])).push_back(r);
  std::size_t target = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (by_class[c].empty())
      throw ArgumentError("class " + std::to_string(c) +
                          (classes == kBeatClasses ? std::string(" (") + kBeatClassNames[c] + ")" : "") +
                          " is absent; cannot up-sample it");
    target = std::max(target, by_class[c].size());
  }
  RandStream rng(seed, stream_ids::balance);
  std::vector<std::size_t> rows;
  rows.reserve(target * classes);
  for (std::size_t c = 0; c < classes; ++c) {
    const auto& members = by_class[c];
    rows.insert(rows.end(), members.begin(), members.end());
    for (std::size_t k = members.size(); k < target; ++k) rows.push_back(members[rng.below(members.size())]);
  }
  const auto order = shuffled_indices(rows.size(), rng.derive(1));
  std::vector<std::size_t> shuffled(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) shuffled[i] = rows[order[i]];
  return subset(set, shuffled);
}

/// The first `per_class` rows of each class, in file order.
inline HeartbeatSet first_per_class(const HeartbeatSet& set, std::size_t per_class,
                                    std::size_t classes = kBeatClasses) {
  std::vector<std::size_t> taken(classes, 0);
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < set.size(); ++r) {
    const auto c = static_cast<std::size_t>(set.labels[r]);
    if (taken[c] < per_class) {
      ++taken[c];
      rows.push_back(r);
    }
  }
  return subset(set, rows);
}

template <typename T>
struct Batch {
  Tensor<T> x;
  std::vector<int> y;
  std::vector<std::size_t> rows;
};

template <typename T>
Batch<T> make_batch(const HeartbeatSet& set, std::span<const std::size_t> rows) {
  Batch<T> b;
  const std::size_t len = set.length();
  std::vector<T> data;
  data.reserve(rows.size() * len);
  for (auto r : rows) {
    auto src = set.signals.row(r);
    data.insert(data.end(), src.begin(), src.end());
    b.y.push_back(set.labels[r]);
  }
  b.x = Tensor<T>({rows.size(), len}, std::move(data));
  b.rows.assign(rows.begin(), rows.end());
  return b;
}

/// Epoch-seeded mini-batches; the final short batch is kept.
template <typename T>
class BatchIterator {
 public:
  BatchIterator(const HeartbeatSet& set, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch)
      : set_(set),
        batch_(batch_size),
        order_(shuffled_indices(set.size(), RandStream(seed, stream_ids::batches).derive(epoch))) {
    if (batch_size == 0) throw ArgumentError("batch size must be at least 1");
  }

  bool next(Batch<T>& out) {
    if (pos_ >= order_.size()) return false;
    const std::size_t n = std::min(batch_, order_.size() - pos_);
    out = make_batch<T>(set_, std::span<const std::size_t>(order_).subspan(pos_, n));
    pos_ += n;
    return true;
  }

  std::size_t batch_count() const { return (order_.size() + batch_ - 1) / batch_; }
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const HeartbeatSet& set_;
  std::size_t batch_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace nsr
