#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "nsr/errors.hpp"
#include "nsr/random.hpp"

namespace nsr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

template <typename T>
inline constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

/**
 * Dense row-major array of float or double with shape metadata.
 *
 * Value semantics: copies are deep. A tensor that is shared between threads
 * must not be mutated.
 */
template <typename T>
class Tensor {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "Tensor supports f32 and f64 only");

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw DimensionError("tensor shape " + shape_string(shape_) + " holds " +
                           std::to_string(shape_size(shape_)) + " values, got " +
                           std::to_string(data_.size()));
  }

  static Tensor vector(std::initializer_list<T> values) {
    return Tensor({values.size()}, std::vector<T>(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T(1);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  bool empty() const { return data_.empty(); }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  T& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Row i of a tensor viewed as [dim(0), size/dim(0)].
  std::span<const T> row(std::size_t i) const {
    const std::size_t w = data_.size() / shape_[0];
    return std::span<const T>(data_).subspan(i * w, w);
  }
  std::span<T> row(std::size_t i) {
    const std::size_t w = data_.size() / shape_[0];
    return std::span<T>(data_).subspan(i * w, w);
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size())
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    if constexpr (std::is_same_v<U, T>) {
      return *this;
    } else {
      return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

namespace detail {

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<const RowMajor<T>> as_matrix(const Tensor<T>& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1))};
}

template <typename T>
Eigen::Map<RowMajor<T>> as_matrix(Tensor<T>& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1))};
}

inline void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2)
    throw DimensionError(std::string(op) + " expects rank-2 operands, got " + shape_string(s));
}

}  // namespace detail

/// Matrix product a·b. The result has the wider of the two dtypes.
template <typename A, typename B>
Tensor<std::common_type_t<A, B>> matmul(const Tensor<A>& a, const Tensor<B>& b) {
  using T = std::common_type_t<A, B>;
  detail::require_rank2(a.shape(), "matmul");
  detail::require_rank2(b.shape(), "matmul");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  const Tensor<T> ac = a.template cast<T>();
  const Tensor<T> bc = b.template cast<T>();
  Tensor<T> out({a.dim(0), b.dim(1)});
  if (a.dim(1) == 0) return out;
  detail::as_matrix(out).noalias() = detail::as_matrix(ac) * detail::as_matrix(bc);
  return out;
}

/// a·bᵀ
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a.shape(), "matmul_nt");
  detail::require_rank2(b.shape(), "matmul_nt");
  if (a.dim(1) != b.dim(1))
    throw DimensionError("matmul_nt shape mismatch: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  Tensor<T> out({a.dim(0), b.dim(0)});
  if (a.dim(1) == 0) return out;
  detail::as_matrix(out).noalias() = detail::as_matrix(a) * detail::as_matrix(b).transpose();
  return out;
}

/// out += aᵀ·b, used for weight gradients.
template <typename T>
void accumulate_tn(Tensor<T>& out, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim(0) != b.dim(0) || out.dim(0) != a.dim(1) || out.dim(1) != b.dim(1))
    throw DimensionError("accumulate_tn shape mismatch: " + shape_string(a.shape()) + "^T x " +
                         shape_string(b.shape()) + " into " + shape_string(out.shape()));
  if (a.dim(0) == 0) return;
  detail::as_matrix(out).noalias() += detail::as_matrix(a).transpose() * detail::as_matrix(b);
}

/**
 * Single-sample 1-D cross-correlation with zero padding.
 *
 * x is [channels, length], kernels is [out_ch, in_ch, k]; the result is
 * [out_ch, floor((length + 2*pad - k)/stride) + 1].
 */
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& kernels, std::size_t stride, std::size_t pad) {
  if (x.rank() != 2 || kernels.rank() != 3)
    throw DimensionError("conv1d expects x [channels, length] and kernels [out, in, k], got " +
                         shape_string(x.shape()) + " and " + shape_string(kernels.shape()));
  if (stride == 0) throw ArgumentError("conv1d stride must be positive");
  const std::size_t in_ch = x.dim(0), len = x.dim(1);
  const std::size_t out_ch = kernels.dim(0), k = kernels.dim(2);
  if (kernels.dim(1) != in_ch)
    throw DimensionError("conv1d channel mismatch: x " + shape_string(x.shape()) + ", kernels " +
                         shape_string(kernels.shape()));
  if (len + 2 * pad < k || k == 0)
    throw DimensionError("conv1d output length < 1 for length " + std::to_string(len) +
                         ", kernel " + std::to_string(k) + ", pad " + std::to_string(pad));
  const std::size_t out_len = (len + 2 * pad - k) / stride + 1;
  Tensor<T> out({out_ch, out_len});
  for (std::size_t o = 0; o < out_ch; ++o)
    for (std::size_t p = 0; p < out_len; ++p) {
      T acc = 0;
      for (std::size_t c = 0; c < in_ch; ++c)
        for (std::size_t j = 0; j < k; ++j) {
          const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(p * stride + j) -
                                     static_cast<std::ptrdiff_t>(pad);
          if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) acc += kernels(o, c, j) * x(c, pos);
        }
      out(o, p) = acc;
    }
  return out;
}

struct Uniform {
  double lo = 0.0, hi = 1.0;
};
struct Normal {
  double mu = 0.0, sigma = 1.0;
};
struct SignBernoulli {};

using Distribution = std::variant<Uniform, Normal, SignBernoulli>;

/// Fills a fresh tensor from the stream, in row-major order.
template <typename T>
Tensor<T> rand(RandStream& stream, const Distribution& dist, Shape shape) {
  Tensor<T> out(std::move(shape));
  std::visit(
      [&](const auto& d) {
        using D = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<D, Uniform>) {
          if (!(d.lo < d.hi))
            throw ArgumentError("uniform requires lo < hi, got [" + std::to_string(d.lo) + ", " +
                                std::to_string(d.hi) + ")");
          for (auto& v : out.data()) v = static_cast<T>(stream.uniform(d.lo, d.hi));
        } else if constexpr (std::is_same_v<D, Normal>) {
          if (!(d.sigma > 0)) throw ArgumentError("normal requires sigma > 0");
          for (auto& v : out.data()) v = static_cast<T>(stream.normal(d.mu, d.sigma));
        } else {
          for (auto& v : out.data()) v = static_cast<T>(stream.sign());
        }
      },
      dist);
  return out;
}

}  // namespace nsr
