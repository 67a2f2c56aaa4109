#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nsr/errors.hpp"
#include "nsr/random.hpp"
#include "nsr/tensor.hpp"

namespace nsr {

enum class LayerKind { dense, relu, conv1d, maxpool1d, residual_begin, residual_end, flatten };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::conv1d: return "conv1d";
    case LayerKind::maxpool1d: return "maxpool1d";
    case LayerKind::residual_begin: return "residual_begin";
    case LayerKind::residual_end: return "residual_end";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

inline std::optional<LayerKind> layer_kind_from_name(const std::string& s) {
  for (auto k : {LayerKind::dense, LayerKind::relu, LayerKind::conv1d, LayerKind::maxpool1d,
                 LayerKind::residual_begin, LayerKind::residual_end, LayerKind::flatten})
    if (s == layer_kind_name(k)) return k;
  return std::nullopt;
}

/// One node of the sequential layer graph. Residual brackets wrap a
/// shape-preserving sub-sequence whose output is added to its input.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in = 0;   // dense: input features; conv1d: input channels
  std::size_t out = 0;  // dense: output features; conv1d: output channels
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool bias = false;

  static LayerSpec dense(std::size_t in, std::size_t out, bool bias = true) {
    return {LayerKind::dense, in, out, 0, 1, 0, bias};
  }
  static LayerSpec relu() { return {LayerKind::relu}; }
  static LayerSpec conv1d(std::size_t in_ch, std::size_t out_ch, std::size_t k,
                          std::size_t stride = 1, std::size_t pad = 0, bool bias = true) {
    return {LayerKind::conv1d, in_ch, out_ch, k, stride, pad, bias};
  }
  static LayerSpec maxpool1d(std::size_t k, std::size_t stride) {
    return {LayerKind::maxpool1d, 0, 0, k, stride, 0, false};
  }
  static LayerSpec residual_begin() { return {LayerKind::residual_begin}; }
  static LayerSpec residual_end() { return {LayerKind::residual_end}; }
  static LayerSpec flatten() { return {LayerKind::flatten}; }

  bool has_params() const { return kind == LayerKind::dense || kind == LayerKind::conv1d; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

template <typename T>
struct Param {
  std::string name;
  std::size_t layer = 0;
  bool is_bias = false;
  Tensor<T> value;
};

/// Gradients aligned index-for-index with Model::params().
template <typename T>
using Gradients = std::vector<Tensor<T>>;

/**
 * Sequential piecewise-linear network: dense, conv1d, relu, maxpool1d,
 * flatten and residual brackets. Parameters are created zeroed; call
 * init_glorot() for a trainable starting point.
 */
template <typename T>
class Model {
 public:
  Model() = default;

  Model(Shape input_shape, std::vector<LayerSpec> layers)
      : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
    validate_and_allocate();
  }

  const Shape& input_shape() const { return input_shape_; }
  std::size_t input_dim() const { return shape_size(input_shape_); }
  std::size_t class_count() const { return shapes_.back()[0]; }
  const std::vector<LayerSpec>& layers() const { return layers_; }

  /// shapes()[i] is the input shape of layer i; shapes().back() is the logit shape.
  const std::vector<Shape>& shapes() const { return shapes_; }

  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }

  const Tensor<T>& weight(std::size_t layer) const { return params_[weight_index_[layer]].value; }
  Tensor<T>& weight(std::size_t layer) { return params_[weight_index_[layer]].value; }
  bool has_bias(std::size_t layer) const { return bias_index_[layer] >= 0; }
  const Tensor<T>& bias(std::size_t layer) const { return params_[bias_index_[layer]].value; }
  Tensor<T>& bias(std::size_t layer) { return params_[bias_index_[layer]].value; }
  std::ptrdiff_t weight_index(std::size_t layer) const { return weight_index_[layer]; }
  std::ptrdiff_t bias_index(std::size_t layer) const { return bias_index_[layer]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  Gradients<T> zero_gradients() const {
    Gradients<T> g;
    g.reserve(params_.size());
    for (const auto& p : params_) g.emplace_back(p.value.shape());
    return g;
  }

  /// Weights uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)); biases zero.
  void init_glorot(RandStream& rng) {
    for (auto& p : params_) {
      if (p.is_bias) {
        p.value.fill(T(0));
        continue;
      }
      const auto& spec = layers_[p.layer];
      const double fan_in = spec.kind == LayerKind::dense ? spec.in : spec.in * spec.kernel;
      const double fan_out = spec.kind == LayerKind::dense ? spec.out : spec.out * spec.kernel;
      const double s = std::sqrt(6.0 / (fan_in + fan_out));
      p.value = rand<T>(rng, Uniform{-s, s}, p.value.shape());
    }
  }

  bool all_finite() const {
    return std::all_of(params_.begin(), params_.end(),
                       [](const Param<T>& p) { return p.value.all_finite(); });
  }

  template <typename U>
  Model<U> cast() const {
    Model<U> m(input_shape_, layers_);
    for (std::size_t i = 0; i < params_.size(); ++i)
      m.params()[i].value = params_[i].value.template cast<U>();
    return m;
  }

 private:
  void validate_and_allocate() {
    if (input_shape_.empty() || input_shape_.size() > 2 || shape_size(input_shape_) == 0)
      throw ArgumentError("input shape must be [features] or [channels, length], got " +
                          shape_string(input_shape_));
    shapes_.clear();
    params_.clear();
    weight_index_.assign(layers_.size(), -1);
    bias_index_.assign(layers_.size(), -1);

    Shape cur = input_shape_;
    std::vector<Shape> brackets;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      shapes_.push_back(cur);
      const std::string where = "layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) + ")";
      switch (l.kind) {
        case LayerKind::dense:
          if (l.in == 0 || l.out == 0) throw ArgumentError(where + ": widths must be positive");
          if (cur.size() != 1 || cur[0] != l.in)
            throw DimensionError(where + " expects [" + std::to_string(l.in) + "], got " +
                                 shape_string(cur));
          add_param(i, false, {l.out, l.in});
          if (l.bias) add_param(i, true, {l.out});
          cur = {l.out};
          break;
        case LayerKind::relu:
          break;
        case LayerKind::conv1d: {
          if (l.in == 0 || l.out == 0 || l.kernel == 0 || l.stride == 0)
            throw ArgumentError(where + ": channels, kernel and stride must be positive");
          if (cur.size() != 2 || cur[0] != l.in)
            throw DimensionError(where + " expects [" + std::to_string(l.in) + ", L], got " +
                                 shape_string(cur));
          if (cur[1] + 2 * l.pad < l.kernel)
            throw DimensionError(where + ": output length < 1 for input " + shape_string(cur));
          const std::size_t len = (cur[1] + 2 * l.pad - l.kernel) / l.stride + 1;
          add_param(i, false, {l.out, l.in, l.kernel});
          if (l.bias) add_param(i, true, {l.out});
          cur = {l.out, len};
          break;
        }
        case LayerKind::maxpool1d:
          if (l.kernel == 0 || l.stride == 0)
            throw ArgumentError(where + ": kernel and stride must be positive");
          if (cur.size() != 2) throw DimensionError(where + " expects [C, L], got " + shape_string(cur));
          if (cur[1] < l.kernel)
            throw DimensionError(where + ": length " + std::to_string(cur[1]) +
                                 " shorter than pooling kernel " + std::to_string(l.kernel));
          cur = {cur[0], (cur[1] - l.kernel) / l.stride + 1};
          break;
        case LayerKind::residual_begin:
          brackets.push_back(cur);
          break;
        case LayerKind::residual_end:
          if (brackets.empty()) throw ArgumentError(where + ": residual_end without residual_begin");
          if (brackets.back() != cur)
            throw DimensionError(where + ": residual branch maps " + shape_string(brackets.back()) +
                                 " to " + shape_string(cur));
          brackets.pop_back();
          break;
        case LayerKind::flatten:
          cur = {shape_size(cur)};
          break;
      }
    }
    if (!brackets.empty()) throw ArgumentError("unclosed residual_begin");
    if (cur.size() != 1)
      throw DimensionError("model output must be a logit vector, got " + shape_string(cur));
    shapes_.push_back(cur);
  }

  void add_param(std::size_t layer, bool is_bias, Shape shape) {
    (is_bias ? bias_index_ : weight_index_)[layer] = static_cast<std::ptrdiff_t>(params_.size());
    params_.push_back({"layer" + std::to_string(layer) + (is_bias ? ".bias" : ".weight"), layer,
                       is_bias, Tensor<T>(std::move(shape))});
  }

  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape> shapes_;
  std::vector<Param<T>> params_;
  std::vector<std::ptrdiff_t> weight_index_;
  std::vector<std::ptrdiff_t> bias_index_;
};

/// (187-128)-RELU-(128-128)-RELU-(128-128)-RELU-(128-32)-(32-5) for the default widths:
/// a ReLU follows every dense layer except the last two.
template <typename T>
Model<T> build_mlp(const std::vector<std::size_t>& widths, bool bias = true) {
  if (widths.size() < 2) throw ArgumentError("build_mlp needs at least an input and an output width");
  for (auto w : widths)
    if (w == 0) throw ArgumentError("build_mlp widths must be positive");
  const std::size_t n_dense = widths.size() - 1;
  std::vector<LayerSpec> layers;
  for (std::size_t i = 0; i < n_dense; ++i) {
    layers.push_back(LayerSpec::dense(widths[i], widths[i + 1], bias));
    if (i + 2 < n_dense) layers.push_back(LayerSpec::relu());
  }
  return Model<T>({widths.front()}, std::move(layers));
}

struct CnnConfig {
  std::size_t input_length = 187;
  std::size_t class_count = 5;
  std::size_t blocks = 5;
  std::size_t channels = 32;
  std::size_t kernel = 5;
  std::size_t pool_kernel = 5;
  std::size_t pool_stride = 2;
  std::size_t dense_width = 32;
  bool bias = true;
};

/// conv stem, `blocks` x {conv, relu, conv, residual add, relu, maxpool}, flatten, dense, relu, dense.
template <typename T>
Model<T> build_cnn(const CnnConfig& cfg) {
  if (cfg.channels == 0 || cfg.kernel == 0 || cfg.kernel % 2 == 0)
    throw ArgumentError("build_cnn needs positive channels and an odd kernel size");
  const std::size_t pad = cfg.kernel / 2;
  std::vector<LayerSpec> layers;
  layers.push_back(LayerSpec::conv1d(1, cfg.channels, cfg.kernel, 1, pad, cfg.bias));
  std::size_t len = cfg.input_length;
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    if (len < cfg.pool_kernel)
      throw DimensionError("build_cnn: block " + std::to_string(b) + " pools length " +
                           std::to_string(len) + " below 1");
    layers.push_back(LayerSpec::residual_begin());
    layers.push_back(LayerSpec::conv1d(cfg.channels, cfg.channels, cfg.kernel, 1, pad, cfg.bias));
    layers.push_back(LayerSpec::relu());
    layers.push_back(LayerSpec::conv1d(cfg.channels, cfg.channels, cfg.kernel, 1, pad, cfg.bias));
    layers.push_back(LayerSpec::residual_end());
    layers.push_back(LayerSpec::relu());
    layers.push_back(LayerSpec::maxpool1d(cfg.pool_kernel, cfg.pool_stride));
    len = (len - cfg.pool_kernel) / cfg.pool_stride + 1;
  }
  layers.push_back(LayerSpec::flatten());
  layers.push_back(LayerSpec::dense(cfg.channels * len, cfg.dense_width, cfg.bias));
  layers.push_back(LayerSpec::relu());
  layers.push_back(LayerSpec::dense(cfg.dense_width, cfg.class_count, cfg.bias));
  return Model<T>({1, cfg.input_length}, std::move(layers));
}

/**
 * ReLU on/off states and max-pool argmax selections of one forward pass over a
 * batch. Together they fix the linear region every sample sits in.
 */
struct MaskRecord {
  std::size_t batch = 0;
  std::vector<std::vector<std::uint8_t>> relu;      // per layer; [batch * features] for relu layers
  std::vector<std::vector<std::uint32_t>> argmax;   // per layer; [batch * C * Lout] for pools
  std::vector<std::size_t> widths;                  // per layer input feature count

  bool relu_on(std::size_t layer, std::size_t sample, std::size_t feature) const {
    return relu[layer][sample * widths[layer] + feature] != 0;
  }

  /// Masks of one sample, for region comparisons.
  bool same_region(const MaskRecord& other, std::size_t sample, std::size_t other_sample) const {
    if (widths != other.widths) return false;
    for (std::size_t l = 0; l < relu.size(); ++l) {
      if (!relu[l].empty()) {
        const std::size_t w = widths[l];
        if (!std::equal(relu[l].begin() + sample * w, relu[l].begin() + (sample + 1) * w,
                        other.relu[l].begin() + other_sample * w))
          return false;
      }
      if (!argmax[l].empty()) {
        const std::size_t w = argmax[l].size() / batch;
        if (!std::equal(argmax[l].begin() + sample * w, argmax[l].begin() + (sample + 1) * w,
                        other.argmax[l].begin() + other_sample * w))
          return false;
      }
    }
    return true;
  }
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;                 // [N, class_count], pre-softmax
  MaskRecord masks;
  std::vector<Tensor<T>> inputs;    // per parametric layer: its input batch; empty otherwise
};

namespace detail {

template <typename T>
using MatMap = Eigen::Map<RowMajor<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMajor<T>>;

inline Eigen::Index ei(std::size_t v) { return static_cast<Eigen::Index>(v); }

template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t len, const LayerSpec& l,
            std::size_t out_len, T* cols) {
  const std::size_t k = l.kernel;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t j = 0; j < k; ++j) {
      T* dst = cols + (c * k + j) * out_len;
      for (std::size_t p = 0; p < out_len; ++p) {
        const std::ptrdiff_t pos =
            static_cast<std::ptrdiff_t>(p * l.stride + j) - static_cast<std::ptrdiff_t>(l.pad);
        dst[p] = (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) ? x[c * len + pos] : T(0);
      }
    }
}

template <typename T>
void col2im_add(const T* cols, std::size_t channels, std::size_t len, const LayerSpec& l,
                std::size_t out_len, T* x) {
  const std::size_t k = l.kernel;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t j = 0; j < k; ++j) {
      const T* src = cols + (c * k + j) * out_len;
      for (std::size_t p = 0; p < out_len; ++p) {
        const std::ptrdiff_t pos =
            static_cast<std::ptrdiff_t>(p * l.stride + j) - static_cast<std::ptrdiff_t>(l.pad);
        if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) x[c * len + pos] += src[p];
      }
    }
}

/// Affine part of a parametric layer; bias optional so the same kernel serves tangents.
template <typename T>
Tensor<T> apply_linear(const Model<T>& m, std::size_t li, const Tensor<T>& x, bool with_bias) {
  const auto& l = m.layers()[li];
  const std::size_t n = x.dim(0);
  if (l.kind == LayerKind::dense) {
    Tensor<T> y = matmul_nt(x, m.weight(li));
    if (with_bias && m.has_bias(li)) {
      const auto& b = m.bias(li);
      for (std::size_t r = 0; r < n; ++r) {
        auto row = y.row(r);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
      }
    }
    return y;
  }
  const auto& in_shape = m.shapes()[li];
  const auto& out_shape = m.shapes()[li + 1];
  const std::size_t C = in_shape[0], L = in_shape[1], O = out_shape[0], Lo = out_shape[1];
  Tensor<T> y({n, O * Lo});
  std::vector<T> cols(C * l.kernel * Lo);
  CMatMap<T> w(m.weight(li).data().data(), ei(O), ei(C * l.kernel));
  for (std::size_t s = 0; s < n; ++s) {
    im2col(x.row(s).data(), C, L, l, Lo, cols.data());
    MatMap<T> out(y.row(s).data(), ei(O), ei(Lo));
    out.noalias() = w * CMatMap<T>(cols.data(), ei(C * l.kernel), ei(Lo));
    if (with_bias && m.has_bias(li)) {
      const auto& b = m.bias(li);
      for (std::size_t o = 0; o < O; ++o) out.row(ei(o)).array() += b[o];
    }
  }
  return y;
}

/// Transpose of apply_linear's linear part.
template <typename T>
Tensor<T> pull_linear(const Model<T>& m, std::size_t li, const Tensor<T>& dy) {
  const auto& l = m.layers()[li];
  const std::size_t n = dy.dim(0);
  if (l.kind == LayerKind::dense) return matmul(dy, m.weight(li));
  const auto& in_shape = m.shapes()[li];
  const auto& out_shape = m.shapes()[li + 1];
  const std::size_t C = in_shape[0], L = in_shape[1], O = out_shape[0], Lo = out_shape[1];
  Tensor<T> dx({n, C * L});
  std::vector<T> cols(C * l.kernel * Lo);
  CMatMap<T> w(m.weight(li).data().data(), ei(O), ei(C * l.kernel));
  for (std::size_t s = 0; s < n; ++s) {
    MatMap<T> dcols(cols.data(), ei(C * l.kernel), ei(Lo));
    dcols.noalias() = w.transpose() * CMatMap<T>(dy.row(s).data(), ei(O), ei(Lo));
    col2im_add(cols.data(), C, L, l, Lo, dx.row(s).data());
  }
  return dx;
}

/// grads[weight] += dyᵀ·x (and grads[bias] += Σ dy when with_bias).
template <typename T>
void accumulate_layer_grads(const Model<T>& m, std::size_t li, const Tensor<T>& dy,
                            const Tensor<T>& x, Gradients<T>& grads, bool with_bias) {
  const auto& l = m.layers()[li];
  auto& gw = grads[m.weight_index(li)];
  const std::size_t n = dy.dim(0);
  if (l.kind == LayerKind::dense) {
    accumulate_tn(gw, dy, x);
    if (with_bias && m.has_bias(li)) {
      auto& gb = grads[m.bias_index(li)];
      for (std::size_t s = 0; s < n; ++s) {
        auto row = dy.row(s);
        for (std::size_t j = 0; j < row.size(); ++j) gb[j] += row[j];
      }
    }
    return;
  }
  const auto& in_shape = m.shapes()[li];
  const auto& out_shape = m.shapes()[li + 1];
  const std::size_t C = in_shape[0], L = in_shape[1], O = out_shape[0], Lo = out_shape[1];
  std::vector<T> cols(C * l.kernel * Lo);
  MatMap<T> gwm(gw.data().data(), ei(O), ei(C * l.kernel));
  for (std::size_t s = 0; s < n; ++s) {
    im2col(x.row(s).data(), C, L, l, Lo, cols.data());
    CMatMap<T> d(dy.row(s).data(), ei(O), ei(Lo));
    gwm.noalias() += d * CMatMap<T>(cols.data(), ei(C * l.kernel), ei(Lo)).transpose();
    if (with_bias && m.has_bias(li)) {
      auto& gb = grads[m.bias_index(li)];
      for (std::size_t o = 0; o < O; ++o) gb[o] += d.row(ei(o)).sum();
    }
  }
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += bd[i];
}

template <typename T>
Tensor<T> as_batch(const Model<T>& m, const Tensor<T>& x) {
  const std::size_t d = m.input_dim();
  if (x.rank() == m.input_shape().size() && x.shape() == m.input_shape()) return x.reshaped({1, d});
  if (x.rank() >= 2 && x.size() == x.dim(0) * d) {
    Shape tail(x.shape().begin() + 1, x.shape().end());
    if (tail == m.input_shape() || (tail.size() == 1 && tail[0] == d))
      return x.reshaped({x.dim(0), d});
  }
  throw DimensionError("input " + shape_string(x.shape()) + " does not match model input " +
                       shape_string(m.input_shape()));
}

template <typename T>
void check_masks(const Model<T>& m, const MaskRecord& masks, std::size_t batch) {
  if (masks.relu.size() != m.layers().size() || masks.batch != batch)
    throw StateError("mask record (" + std::to_string(masks.relu.size()) + " layers, batch " +
                     std::to_string(masks.batch) + ") does not match model (" +
                     std::to_string(m.layers().size()) + " layers) and batch " +
                     std::to_string(batch));
  for (std::size_t i = 0; i < m.layers().size(); ++i) {
    const auto k = m.layers()[i].kind;
    const std::size_t w = shape_size(m.shapes()[i]);
    if (masks.widths[i] != w ||
        (k == LayerKind::relu && masks.relu[i].size() != batch * w) ||
        (k == LayerKind::maxpool1d && masks.argmax[i].size() != batch * shape_size(m.shapes()[i + 1])))
      throw StateError("mask record layer " + std::to_string(i) + " does not match the model");
  }
}

}  // namespace detail

/**
 * Forward pass over a batch [N, input...]. Records ReLU masks and pool
 * argmaxes; when keep_inputs is set also keeps each parametric layer's input
 * for gradient accumulation.
 */
template <typename T>
ForwardResult<T> forward(const Model<T>& m, const Tensor<T>& x_in, bool keep_inputs = true) {
  Tensor<T> x = detail::as_batch(m, x_in);
  if (!x.all_finite()) throw InputError("forward: input contains non-finite values");
  const std::size_t n = x.dim(0);
  const auto& layers = m.layers();
  ForwardResult<T> r;
  r.masks.batch = n;
  r.masks.relu.resize(layers.size());
  r.masks.argmax.resize(layers.size());
  r.masks.widths.resize(layers.size());
  r.inputs.resize(layers.size());
  std::vector<Tensor<T>> stack;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    r.masks.widths[i] = shape_size(m.shapes()[i]);
    switch (l.kind) {
      case LayerKind::dense:
      case LayerKind::conv1d: {
        Tensor<T> y = detail::apply_linear(m, i, x, true);
        if (keep_inputs) r.inputs[i] = std::move(x);
        x = std::move(y);
        break;
      }
      case LayerKind::relu: {
        auto& mask = r.masks.relu[i];
        mask.resize(x.size());
        auto d = x.data();
        for (std::size_t j = 0; j < d.size(); ++j) {
          mask[j] = d[j] > T(0);
          if (!mask[j]) d[j] = T(0);
        }
        break;
      }
      case LayerKind::maxpool1d: {
        const std::size_t C = m.shapes()[i][0], L = m.shapes()[i][1], Lo = m.shapes()[i + 1][1];
        Tensor<T> y({n, C * Lo});
        auto& am = r.masks.argmax[i];
        am.resize(n * C * Lo);
        for (std::size_t s = 0; s < n; ++s) {
          auto xin = x.row(s);
          auto yo = y.row(s);
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < Lo; ++p) {
              std::size_t best = c * L + p * l.stride;
              for (std::size_t j = 1; j < l.kernel; ++j) {
                const std::size_t idx = c * L + p * l.stride + j;
                if (xin[idx] > xin[best]) best = idx;
              }
              yo[c * Lo + p] = xin[best];
              am[s * C * Lo + c * Lo + p] = static_cast<std::uint32_t>(best);
            }
        }
        x = std::move(y);
        break;
      }
      case LayerKind::residual_begin:
        stack.push_back(x);
        break;
      case LayerKind::residual_end:
        detail::add_inplace(x, stack.back());
        stack.pop_back();
        break;
      case LayerKind::flatten:
        break;
    }
  }
  r.logits = std::move(x);
  return r;
}

/// Logits only; no masks or inputs retained beyond the pass.
template <typename T>
Tensor<T> predict_logits(const Model<T>& m, const Tensor<T>& x) {
  return forward(m, x, false).logits;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  std::vector<int> out(logits.dim(0));
  for (std::size_t s = 0; s < out.size(); ++s) {
    auto row = logits.row(s);
    out[s] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

namespace detail {
template <typename T>
Tensor<T> frozen_pass(const Model<T>& m, const MaskRecord& masks, const Tensor<T>& directions,
                      std::vector<Tensor<T>>* layer_inputs, bool with_bias);
}  // namespace detail

/**
 * Pushes per-sample input directions [N, D] through the mask-frozen linear
 * map (biases dropped): returns J·v per sample, [N, class_count]. When
 * `layer_inputs` is given it receives the tangent entering each parametric layer.
 */
template <typename T>
Tensor<T> tangent(const Model<T>& m, const MaskRecord& masks, const Tensor<T>& directions,
                  std::vector<Tensor<T>>* layer_inputs = nullptr) {
  return detail::frozen_pass(m, masks, directions, layer_inputs, false);
}

/**
 * The affine map of the recorded region applied to u, biases included:
 * frozen_affine(m, masks, x) reproduces the logits of x, and
 * frozen_affine(m, masks, 0) is the region's effective bias.
 */
template <typename T>
Tensor<T> frozen_affine(const Model<T>& m, const MaskRecord& masks, const Tensor<T>& u) {
  return detail::frozen_pass<T>(m, masks, u, nullptr, true);
}

namespace detail {

template <typename T>
Tensor<T> frozen_pass(const Model<T>& m, const MaskRecord& masks, const Tensor<T>& directions,
                      std::vector<Tensor<T>>* layer_inputs, bool with_bias) {
  Tensor<T> t = detail::as_batch(m, directions);
  const std::size_t n = t.dim(0);
  detail::check_masks(m, masks, n);
  const auto& layers = m.layers();
  if (layer_inputs) layer_inputs->assign(layers.size(), Tensor<T>());
  std::vector<Tensor<T>> stack;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    switch (l.kind) {
      case LayerKind::dense:
      case LayerKind::conv1d: {
        Tensor<T> y = detail::apply_linear(m, i, t, with_bias);
        if (layer_inputs) (*layer_inputs)[i] = std::move(t);
        t = std::move(y);
        break;
      }
      case LayerKind::relu: {
        const auto& mask = masks.relu[i];
        auto d = t.data();
        for (std::size_t j = 0; j < d.size(); ++j)
          if (!mask[j]) d[j] = T(0);
        break;
      }
      case LayerKind::maxpool1d: {
        const std::size_t w_in = shape_size(m.shapes()[i]), w_out = shape_size(m.shapes()[i + 1]);
        Tensor<T> y({n, w_out});
        const auto& am = masks.argmax[i];
        for (std::size_t s = 0; s < n; ++s) {
          auto yo = y.row(s);
          auto xi = t.row(s);
          for (std::size_t j = 0; j < w_out; ++j) yo[j] = xi[am[s * w_out + j]];
        }
        (void)w_in;
        t = std::move(y);
        break;
      }
      case LayerKind::residual_begin:
        stack.push_back(t);
        break;
      case LayerKind::residual_end:
        detail::add_inplace(t, stack.back());
        stack.pop_back();
        break;
      case LayerKind::flatten:
        break;
    }
  }
  return t;
}

}  // namespace detail

/**
 * Pulls per-sample logit-space seeds [N, class_count] back to input space
 * through the mask-frozen graph: returns Jᵀ·seed per sample, [N, D]. When
 * `adjoints` is given it receives the adjoint at the output of each
 * parametric layer (what weight gradients are built from).
 */
template <typename T>
Tensor<T> pullback(const Model<T>& m, const MaskRecord& masks, Tensor<T> seed,
                   std::vector<Tensor<T>>* adjoints = nullptr) {
  const auto& layers = m.layers();
  if (seed.rank() != 2 || seed.dim(1) != m.class_count())
    throw DimensionError("pullback seed must be [N, " + std::to_string(m.class_count()) + "], got " +
                         shape_string(seed.shape()));
  const std::size_t n = seed.dim(0);
  detail::check_masks(m, masks, n);
  if (adjoints) adjoints->assign(layers.size(), Tensor<T>());
  std::vector<Tensor<T>> stack;
  Tensor<T> g = std::move(seed);
  for (std::size_t i = layers.size(); i-- > 0;) {
    const auto& l = layers[i];
    switch (l.kind) {
      case LayerKind::dense:
      case LayerKind::conv1d: {
        Tensor<T> dx = detail::pull_linear(m, i, g);
        if (adjoints) (*adjoints)[i] = std::move(g);
        g = std::move(dx);
        break;
      }
      case LayerKind::relu: {
        const auto& mask = masks.relu[i];
        auto d = g.data();
        for (std::size_t j = 0; j < d.size(); ++j)
          if (!mask[j]) d[j] = T(0);
        break;
      }
      case LayerKind::maxpool1d: {
        const std::size_t w_in = shape_size(m.shapes()[i]), w_out = shape_size(m.shapes()[i + 1]);
        Tensor<T> dx({n, w_in});
        const auto& am = masks.argmax[i];
        for (std::size_t s = 0; s < n; ++s) {
          auto gi = g.row(s);
          auto xo = dx.row(s);
          for (std::size_t j = 0; j < w_out; ++j) xo[am[s * w_out + j]] += gi[j];
        }
        g = std::move(dx);
        break;
      }
      case LayerKind::residual_end:
        stack.push_back(g);
        break;
      case LayerKind::residual_begin:
        detail::add_inplace(g, stack.back());
        stack.pop_back();
        break;
      case LayerKind::flatten:
        break;
    }
  }
  return g;
}

/// grads += Σ_layers adjoint_outᵀ · layer_input over parametric layers.
template <typename T>
void accumulate_param_grads(const Model<T>& m, const std::vector<Tensor<T>>& adjoints,
                            const std::vector<Tensor<T>>& inputs, Gradients<T>& grads,
                            bool with_bias) {
  for (std::size_t i = 0; i < m.layers().size(); ++i) {
    if (!m.layers()[i].has_params()) continue;
    if (adjoints[i].empty() || inputs[i].empty())
      throw StateError("missing adjoint or input for layer " + std::to_string(i));
    detail::accumulate_layer_grads(m, i, adjoints[i], inputs[i], grads, with_bias);
  }
}

template <typename T>
Tensor<T> one_hot_rows(const std::vector<int>& classes, std::size_t class_count) {
  Tensor<T> seeds({classes.size(), class_count});
  for (std::size_t s = 0; s < classes.size(); ++s)
    if (classes[s] >= 0) seeds(s, static_cast<std::size_t>(classes[s])) = T(1);
  return seeds;
}

/**
 * Effective weight rows for one class per sample: row n of `w` is w_c(x_n) for
 * c = classes[n], with z_c(x_n) = w_c(x_n)ᵀ x_n + b_c(x_n) exactly inside the
 * recorded region. classes[n] < 0 leaves row n zero. The recorded adjoints let
 * backprop_frozen reuse this pass.
 */
template <typename T>
struct EffectiveRows {
  std::vector<int> classes;
  Tensor<T> w;                       // [N, D]
  std::vector<Tensor<T>> adjoints;   // per parametric layer
};

template <typename T>
EffectiveRows<T> effective_rows(const Model<T>& m, const MaskRecord& masks,
                                const std::vector<int>& classes) {
  for (int c : classes)
    if (c >= static_cast<int>(m.class_count()))
      throw ArgumentError("class index " + std::to_string(c) + " out of range");
  EffectiveRows<T> r;
  r.classes = classes;
  r.w = pullback(m, masks, one_hot_rows<T>(classes, m.class_count()), &r.adjoints);
  return r;
}

/// Per-sample effective affine map restricted to a class set.
template <typename T>
struct EffectiveLinear {
  std::vector<std::size_t> classes;
  Tensor<T> w;  // [classes.size(), D]
  Tensor<T> b;  // [classes.size()]

  std::span<const T> row_for(std::size_t cls) const {
    for (std::size_t i = 0; i < classes.size(); ++i)
      if (classes[i] == cls) return w.row(i);
    throw ContractError("effective weight for class " + std::to_string(cls) + " was not computed");
  }
};

/**
 * w_i by pulling e_i back through the frozen graph, b_i = z_i - w_iᵀx.
 * `fwd` must come from forward() on the same x.
 */
template <typename T>
std::vector<EffectiveLinear<T>> effective_linear(const Model<T>& m, const Tensor<T>& x_in,
                                                 const ForwardResult<T>& fwd,
                                                 const std::vector<std::size_t>& classes) {
  const Tensor<T> x = detail::as_batch(m, x_in);
  const std::size_t n = x.dim(0), d = m.input_dim();
  detail::check_masks(m, fwd.masks, n);
  if (fwd.logits.dim(0) != n) throw StateError("forward result batch does not match x");
  std::vector<EffectiveLinear<T>> out(n);
  for (auto& e : out) {
    e.classes = classes;
    e.w = Tensor<T>({classes.size(), d});
    e.b = Tensor<T>({classes.size()});
  }
  for (std::size_t ci = 0; ci < classes.size(); ++ci) {
    if (classes[ci] >= m.class_count())
      throw ArgumentError("class index " + std::to_string(classes[ci]) + " out of range");
    const std::vector<int> cls(n, static_cast<int>(classes[ci]));
    const Tensor<T> w = pullback(m, fwd.masks, one_hot_rows<T>(cls, m.class_count()));
    for (std::size_t s = 0; s < n; ++s) {
      auto src = w.row(s);
      auto xs = x.row(s);
      std::copy(src.begin(), src.end(), out[s].w.row(ci).begin());
      T dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += src[j] * xs[j];
      out[s].b[ci] = fwd.logits(s, classes[ci]) - dot;
    }
  }
  return out;
}

template <typename T>
std::vector<EffectiveLinear<T>> effective_linear(const Model<T>& m, const Tensor<T>& x) {
  std::vector<std::size_t> all(m.class_count());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return effective_linear(m, x, forward(m, x, false), all);
}

/**
 * Derivative of a batch objective with respect to its inputs: the logits and
 * effective weight rows. A term says dLoss/dw_{classes[n]}(x_n) = g.row(n).
 */
template <typename T>
struct WeightTerm {
  std::vector<int> classes;
  Tensor<T> g;                                  // [N, D]
  std::shared_ptr<const EffectiveRows<T>> rows;  // optional cached pullback for `classes`
};

template <typename T>
struct ObjectiveGrad {
  T value = 0;
  Tensor<T> dlogits;                            // [N, class_count]
  std::vector<WeightTerm<T>> terms;
};

/**
 * Parameter gradients of a scalar built from logits and effective weights,
 * with every ReLU mask and pool argmax held at its forward-pass value.
 *
 * The logit part is ordinary backprop. For a weight term, w_c = Jᵀe_c is
 * bilinear in (adjoint of e_c, tangent of g) at each parametric layer, so
 * ∂(gᵀw_c)/∂W_l = a_l(e_c) ⊗ t_{l-1}(g), and biases do not enter.
 */
template <typename T>
Gradients<T> backprop_frozen(const Model<T>& m, const ForwardResult<T>& fwd,
                             const ObjectiveGrad<T>& obj) {
  const std::size_t n = fwd.masks.batch;
  if (obj.dlogits.shape() != Shape{n, m.class_count()})
    throw ContractError("objective logit gradient has shape " + shape_string(obj.dlogits.shape()));
  if (fwd.inputs.size() != m.layers().size())
    throw StateError("forward result was recorded without layer inputs");
  Gradients<T> grads = m.zero_gradients();
  std::vector<Tensor<T>> adj;
  pullback(m, fwd.masks, obj.dlogits, &adj);
  accumulate_param_grads(m, adj, fwd.inputs, grads, true);

  for (const auto& term : obj.terms) {
    if (term.classes.size() != n || term.g.shape() != Shape{n, m.input_dim()})
      throw ContractError("weight term does not cover the batch");
    for (int c : term.classes)
      if (c >= static_cast<int>(m.class_count()))
        throw ContractError("weight term names class " + std::to_string(c));
    std::vector<Tensor<T>> local;
    const std::vector<Tensor<T>>* adjoints = nullptr;
    if (term.rows) {
      if (term.rows->classes != term.classes)
        throw ContractError("cached effective rows were computed for different classes");
      adjoints = &term.rows->adjoints;
    } else {
      pullback(m, fwd.masks, one_hot_rows<T>(term.classes, m.class_count()), &local);
      adjoints = &local;
    }
    std::vector<Tensor<T>> tin;
    tangent(m, fwd.masks, term.g, &tin);
    accumulate_param_grads(m, *adjoints, tin, grads, false);
  }
  return grads;
}

}  // namespace nsr
