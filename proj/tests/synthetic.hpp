#pragma once

// Synthetic beat-like data for tests: each class is a bump at its own
// position on a flat baseline, plus uniform noise. Not ECG.

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "nsr/data.hpp"

namespace synthetic {

inline nsr::HeartbeatSet beats(std::size_t per_class, std::size_t length, std::size_t classes,
                               std::uint64_t seed, double noise = 0.05) {
  nsr::RandStream rng(seed, 77);
  nsr::HeartbeatSet s;
  std::vector<float> v;
  for (std::size_t r = 0; r < per_class * classes; ++r) {
    const std::size_t c = r % classes;
    const double centre = (static_cast<double>(c) + 0.5) * static_cast<double>(length) / static_cast<double>(classes);
    const double width = static_cast<double>(length) / (3.0 * static_cast<double>(classes));
    for (std::size_t j = 0; j < length; ++j) {
      const double d = (static_cast<double>(j) - centre) / width;
      const double a = 0.2 + 0.6 * std::exp(-0.5 * d * d) + rng.uniform(-noise, noise);
      v.push_back(static_cast<float>(std::clamp(a, 0.0, 1.0)));
    }
    s.labels.push_back(static_cast<int>(c));
  }
  s.signals = nsr::Tensor<float>({s.labels.size(), length}, std::move(v));
  s.digest = nsr::content_digest(s);
  return s;
}

}  // namespace synthetic
