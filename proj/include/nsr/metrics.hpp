#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "nsr/data.hpp"
#include "nsr/errors.hpp"
#include "nsr/model.hpp"

namespace nsr {

struct Metrics {
  double acc = 0;   // overall accuracy
  double prec = 0;  // unweighted mean of per-class precision
  double mean_recall = 0;
};

/// Per-class precision is 0 for a class that is never predicted.
inline Metrics metrics(const std::vector<int>& pred, const std::vector<int>& truth,
                       std::size_t classes = kBeatClasses) {
  if (pred.size() != truth.size()) throw ArgumentError("metrics: prediction and truth lengths differ");
  if (pred.empty()) throw ArgumentError("metrics: empty input");
  std::vector<std::size_t> tp(classes, 0), predicted(classes, 0), actual(classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || truth[i] < 0 || static_cast<std::size_t>(pred[i]) >= classes ||
        static_cast<std::size_t>(truth[i]) >= classes)
      throw ArgumentError("metrics: label out of range");
    ++predicted[pred[i]];
    ++actual[truth[i]];
    if (pred[i] == truth[i]) {
      ++tp[pred[i]];
      ++correct;
    }
  }
  Metrics m;
  m.acc = static_cast<double>(correct) / static_cast<double>(pred.size());
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    m.prec += predicted[c] ? static_cast<double>(tp[c]) / predicted[c] : 0.0;
    if (actual[c]) {
      m.mean_recall += static_cast<double>(tp[c]) / actual[c];
      ++present;
    }
  }
  m.prec /= static_cast<double>(classes);
  if (present) m.mean_recall /= static_cast<double>(present);
  return m;
}

template <typename T>
std::vector<int> predict(const Model<T>& m, const HeartbeatSet& set, std::size_t chunk = 1024) {
  std::vector<int> out;
  out.reserve(set.size());
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < set.size(); start += chunk) {
    rows.clear();
    for (std::size_t r = start; r < std::min(set.size(), start + chunk); ++r) rows.push_back(r);
    const auto b = make_batch<T>(set, rows);
    const auto p = argmax_rows(predict_logits(m, b.x));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

/// ACC and PREC on un-attacked data.
template <typename T>
Metrics evaluate_clean(const Model<T>& m, const HeartbeatSet& set) {
  return metrics(predict(m, set), set.labels, m.class_count());
}

}  // namespace nsr
