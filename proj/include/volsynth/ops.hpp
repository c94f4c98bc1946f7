#pragma once

// Differentiable operations. Each backward rule is expressed with the
// operations in this file, so gradients computed with create_graph=true can
// be differentiated again.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "volsynth/conv_kernels.hpp"
#include "volsynth/conv_spec.hpp"
#include "volsynth/tensor.hpp"

namespace volsynth {

namespace detail {

template <class T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class T, class F>
std::vector<T> map_binary(const BasicTensor<T>& a, const BasicTensor<T>& b, F f) {
  std::vector<T> out(a.numel());
  const auto& x = a.data();
  const auto& y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  return out;
}

template <class T, class F>
std::vector<T> map_unary(const BasicTensor<T>& a, F f) {
  std::vector<T> out(a.numel());
  const auto& x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T c);

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  return record<T>(a.shape(), detail::map_binary(a, b, [](T x, T y) { return x + y; }), "add", {a, b},
                   [](const BasicTensor<T>& g, const std::vector<bool>&) { return std::vector<BasicTensor<T>>{g, g}; });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  return record<T>(a.shape(), detail::map_binary(a, b, [](T x, T y) { return x - y; }), "sub", {a, b},
                   [](const BasicTensor<T>& g, const std::vector<bool>& needs) {
                     return std::vector<BasicTensor<T>>{g, needs[1] ? scale(g, T(-1)) : BasicTensor<T>{}};
                   });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  return record<T>(a.shape(), detail::map_binary(a, b, [](T x, T y) { return x * y; }), "mul", {a, b},
                   [a, b](const BasicTensor<T>& g, const std::vector<bool>& needs) {
                     return std::vector<BasicTensor<T>>{needs[0] ? mul(g, b) : BasicTensor<T>{},
                                                        needs[1] ? mul(g, a) : BasicTensor<T>{}};
                   });
}

template <class T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "div");
  return record<T>(a.shape(), detail::map_binary(a, b, [](T x, T y) { return x / y; }), "div", {a, b},
                   [a, b](const BasicTensor<T>& g, const std::vector<bool>& needs) {
                     BasicTensor<T> ga, gb;
                     if (needs[0]) ga = div(g, b);
                     if (needs[1]) gb = scale(div(mul(g, a), mul(b, b)), T(-1));
                     return std::vector<BasicTensor<T>>{ga, gb};
                   });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T c) {
  return record<T>(a.shape(), detail::map_unary(a, [c](T x) { return x * c; }), "scale", {a},
                   [c](const BasicTensor<T>& g, const std::vector<bool>&) {
                     return std::vector<BasicTensor<T>>{scale(g, c)};
                   });
}

template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T c) {
  return record<T>(a.shape(), detail::map_unary(a, [c](T x) { return x + c; }), "add_scalar", {a},
                   [](const BasicTensor<T>& g, const std::vector<bool>&) { return std::vector<BasicTensor<T>>{g}; });
}

template <class T>
BasicTensor<T> neg(const BasicTensor<T>& a) {
  return scale(a, T(-1));
}

template <class T>
BasicTensor<T> square(const BasicTensor<T>& a) {
  return mul(a, a);
}

template <class T>
BasicTensor<T> sqrt(const BasicTensor<T>& a) {
  for (T v : a.data())
    if (v < T(0)) throw NumericError("sqrt of negative value");
  return record<T>(a.shape(), detail::map_unary(a, [](T x) { return std::sqrt(x); }), "sqrt", {a},
                   [a](const BasicTensor<T>& g, const std::vector<bool>&) {
                     return std::vector<BasicTensor<T>>{div(g, scale(sqrt(a), T(2)))};
                   });
}

/// max(x, floor) elementwise; the gradient passes where x > floor.
template <class T>
BasicTensor<T> clamp_min(const BasicTensor<T>& a, T floor) {
  BasicTensor<T> mask(a.shape(), detail::map_unary(a, [floor](T x) { return x > floor ? T(1) : T(0); }));
  return record<T>(a.shape(), detail::map_unary(a, [floor](T x) { return std::max(x, floor); }), "clamp_min", {a},
                   [mask](const BasicTensor<T>& g, const std::vector<bool>&) {
                     return std::vector<BasicTensor<T>>{mul(g, mask)};
                   });
}

/// x for x >= 0, slope * x otherwise. slope = 0 gives ReLU.
template <class T>
BasicTensor<T> leaky_relu(const BasicTensor<T>& a, T slope) {
  BasicTensor<T> mask(a.shape(), detail::map_unary(a, [slope](T x) { return x >= T(0) ? T(1) : slope; }));
  return record<T>(a.shape(), detail::map_unary(a, [slope](T x) { return x >= T(0) ? x : slope * x; }),
                   "leaky_relu", {a}, [mask](const BasicTensor<T>& g, const std::vector<bool>&) {
                     return std::vector<BasicTensor<T>>{mul(g, mask)};
                   });
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  return leaky_relu(a, T(0));
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts (each pair is mutually adjoint)

template <class T>
BasicTensor<T> expand_scalar(const BasicTensor<T>& s, const Shape& shape);

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  const Shape in_shape = a.shape();
  return record<T>(Shape{1}, std::vector<T>{acc}, "sum", {a},
                   [in_shape](const BasicTensor<T>& g, const std::vector<bool>&) {
                     return std::vector<BasicTensor<T>>{expand_scalar(g, in_shape)};
                   });
}

template <class T>
BasicTensor<T> expand_scalar(const BasicTensor<T>& s, const Shape& shape) {
  if (s.numel() != 1) throw DimensionError("expand_scalar expects a single-element tensor");
  return record<T>(shape, std::vector<T>(numel(shape), s.data()[0]), "expand_scalar", {s},
                   [](const BasicTensor<T>& g, const std::vector<bool>&) {
                     return std::vector<BasicTensor<T>>{sum(g)};
                   });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
BasicTensor<T> broadcast_per_sample(const BasicTensor<T>& v, const Shape& shape);

/// [N, ...] -> [N]
template <class T>
BasicTensor<T> sum_per_sample(const BasicTensor<T>& a) {
  const std::size_t n = a.dim(0), inner = a.numel() / std::max<std::size_t>(n, 1);
  std::vector<T> out(n, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < inner; ++j) out[i] += a.data()[i * inner + j];
  const Shape in_shape = a.shape();
  return record<T>(Shape{n}, std::move(out), "sum_per_sample", {a},
                   [in_shape](const BasicTensor<T>& g, const std::vector<bool>&) {
                     return std::vector<BasicTensor<T>>{broadcast_per_sample(g, in_shape)};
                   });
}

/// [N] -> shape with leading extent N
template <class T>
BasicTensor<T> broadcast_per_sample(const BasicTensor<T>& v, const Shape& shape) {
  if (v.rank() != 1 || shape.empty() || shape[0] != v.dim(0))
    throw DimensionError("broadcast_per_sample: " + shape_str(v.shape()) + " onto " + shape_str(shape));
  const std::size_t n = shape[0], inner = numel(shape) / std::max<std::size_t>(n, 1);
  std::vector<T> out(numel(shape));
  for (std::size_t i = 0; i < n; ++i) std::fill_n(out.begin() + i * inner, inner, v.data()[i]);
  return record<T>(shape, std::move(out), "broadcast_per_sample", {v},
                   [](const BasicTensor<T>& g, const std::vector<bool>&) {
                     return std::vector<BasicTensor<T>>{sum_per_sample(g)};
                   });
}

template <class T>
BasicTensor<T> broadcast_channels(const BasicTensor<T>& a, std::size_t channels);

/// [N, C, ...] -> [N, 1, ...]
template <class T>
BasicTensor<T> sum_channels(const BasicTensor<T>& a) {
  if (a.rank() < 2) throw DimensionError("sum_channels expects [N, C, ...]");
  const std::size_t n = a.dim(0), c = a.dim(1), inner = a.numel() / (n * c);
  Shape out_shape = a.shape();
  out_shape[1] = 1;
  std::vector<T> out(n * inner, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < inner; ++j) out[i * inner + j] += a.data()[(i * c + ch) * inner + j];
  return record<T>(out_shape, std::move(out), "sum_channels", {a},
                   [c](const BasicTensor<T>& g, const std::vector<bool>&) {
                     return std::vector<BasicTensor<T>>{broadcast_channels(g, c)};
                   });
}

/// [N, 1, ...] -> [N, C, ...]
template <class T>
BasicTensor<T> broadcast_channels(const BasicTensor<T>& a, std::size_t channels) {
  if (a.rank() < 2 || a.dim(1) != 1) throw DimensionError("broadcast_channels expects [N, 1, ...]");
  const std::size_t n = a.dim(0), inner = a.numel() / n;
  Shape out_shape = a.shape();
  out_shape[1] = channels;
  std::vector<T> out(n * channels * inner);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < channels; ++ch)
      std::copy_n(a.data().begin() + i * inner, inner, out.begin() + (i * channels + ch) * inner);
  return record<T>(out_shape, std::move(out), "broadcast_channels", {a},
                   [](const BasicTensor<T>& g, const std::vector<bool>&) {
                     return std::vector<BasicTensor<T>>{sum_channels(g)};
                   });
}

template <class T>
BasicTensor<T> broadcast_bias(const BasicTensor<T>& b, const Shape& shape);

/// [N, C, ...] -> [C]
template <class T>
BasicTensor<T> sum_to_bias(const BasicTensor<T>& a) {
  const std::size_t n = a.dim(0), c = a.dim(1), inner = a.numel() / (n * c);
  std::vector<T> out(c, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* p = a.data().data() + (i * c + ch) * inner;
      T acc = T(0);
      for (std::size_t j = 0; j < inner; ++j) acc += p[j];
      out[ch] += acc;
    }
  const Shape in_shape = a.shape();
  return record<T>(Shape{c}, std::move(out), "sum_to_bias", {a},
                   [in_shape](const BasicTensor<T>& g, const std::vector<bool>&) {
                     return std::vector<BasicTensor<T>>{broadcast_bias(g, in_shape)};
                   });
}

/// [C] -> [N, C, ...]
template <class T>
BasicTensor<T> broadcast_bias(const BasicTensor<T>& b, const Shape& shape) {
  if (b.rank() != 1 || shape.size() < 2 || shape[1] != b.dim(0))
    throw DimensionError("bias of shape " + shape_str(b.shape()) + " does not match " + shape_str(shape));
  const std::size_t n = shape[0], c = shape[1], inner = numel(shape) / (n * c);
  std::vector<T> out(numel(shape));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) std::fill_n(out.begin() + (i * c + ch) * inner, inner, b.data()[ch]);
  return record<T>(shape, std::move(out), "broadcast_bias", {b},
                   [](const BasicTensor<T>& g, const std::vector<bool>&) {
                     return std::vector<BasicTensor<T>>{sum_to_bias(g)};
                   });
}

template <class T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& b) {
  return add(x, broadcast_bias(b, x.shape()));
}

/// Per-sample Euclidean norm, [N, ...] -> [N]. The gradient at a zero-norm
/// sample is taken as zero.
template <class T>
BasicTensor<T> norm_per_sample(const BasicTensor<T>& a) {
  const std::size_t n = a.dim(0), inner = a.numel() / std::max<std::size_t>(n, 1);
  std::vector<T> out(n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    T acc = T(0);
    for (std::size_t j = 0; j < inner; ++j) acc += a.data()[i * inner + j] * a.data()[i * inner + j];
    out[i] = std::sqrt(acc);
  }
  return record<T>(Shape{n}, std::move(out), "norm_per_sample", {a},
                   [a](const BasicTensor<T>& g, const std::vector<bool>&) {
                     const auto safe = clamp_min(norm_per_sample(a), std::numeric_limits<T>::min());
                     return std::vector<BasicTensor<T>>{mul(a, broadcast_per_sample(div(g, safe), a.shape()))};
                   });
}

/// Softmax over axis 1 of [N, C, ...].
template <class T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& a) {
  if (a.rank() < 2) throw DimensionError("softmax_channels expects [N, C, ...]");
  const std::size_t n = a.dim(0), c = a.dim(1), inner = a.numel() / (n * c);
  std::vector<T> out(a.numel());
  const auto& x = a.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < inner; ++j) {
      T mx = x[(i * c) * inner + j];
      for (std::size_t ch = 1; ch < c; ++ch) mx = std::max(mx, x[(i * c + ch) * inner + j]);
      T z = T(0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T e = std::exp(x[(i * c + ch) * inner + j] - mx);
        out[(i * c + ch) * inner + j] = e;
        z += e;
      }
      for (std::size_t ch = 0; ch < c; ++ch) out[(i * c + ch) * inner + j] /= z;
    }
  return record<T>(a.shape(), std::move(out), "softmax_channels", {a},
                   [a, c](const BasicTensor<T>& g, const std::vector<bool>&) {
                     const auto y = softmax_channels(a);
                     const auto dot = broadcast_channels(sum_channels(mul(g, y)), c);
                     return std::vector<BasicTensor<T>>{mul(y, sub(g, dot))};
                   });
}

// ---------------------------------------------------------------------------
// Layout

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel())
    throw DimensionError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  const Shape in_shape = a.shape();
  return record<T>(std::move(shape), a.data(), "reshape", {a},
                   [in_shape](const BasicTensor<T>& g, const std::vector<bool>&) {
                     return std::vector<BasicTensor<T>>{reshape(g, in_shape)};
                   });
}

/// out.shape[i] = in.shape[perm[i]]
template <class T>
BasicTensor<T> permute(const BasicTensor<T>& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r) throw DimensionError("permutation rank mismatch");
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.dim(i);
  Shape out_shape(r);
  std::vector<std::size_t> src_stride(r), inverse(r);
  std::vector<bool> used(r, false);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r || used[perm[i]]) throw DimensionError("invalid permutation");
    used[perm[i]] = true;
    out_shape[i] = a.dim(perm[i]);
    src_stride[i] = in_strides[perm[i]];
    inverse[perm[i]] = i;
  }
  std::vector<T> out(a.numel());
  std::vector<std::size_t> idx(r, 0);
  const auto& x = a.data();
  for (std::size_t o = 0; o < out.size(); ++o) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * src_stride[i];
    out[o] = x[src];
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return record<T>(out_shape, std::move(out), "permute", {a},
                   [inverse](const BasicTensor<T>& g, const std::vector<bool>&) {
                     return std::vector<BasicTensor<T>>{permute(g, inverse)};
                   });
}

template <class T>
BasicTensor<T> scatter_batch(const BasicTensor<T>& a, const std::vector<std::size_t>& index, std::size_t batch);

/// Rows of the leading axis: out[i] = a[index[i]].
template <class T>
BasicTensor<T> select_batch(const BasicTensor<T>& a, const std::vector<std::size_t>& index) {
  const std::size_t n = a.dim(0), inner = a.numel() / std::max<std::size_t>(n, 1);
  Shape out_shape = a.shape();
  out_shape[0] = index.size();
  std::vector<T> out(index.size() * inner);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) throw DimensionError("select_batch index out of range");
    std::copy_n(a.data().begin() + index[i] * inner, inner, out.begin() + i * inner);
  }
  return record<T>(out_shape, std::move(out), "select_batch", {a},
                   [index, n](const BasicTensor<T>& g, const std::vector<bool>&) {
                     return std::vector<BasicTensor<T>>{scatter_batch(g, index, n)};
                   });
}

/// Adjoint of select_batch: out[index[i]] += a[i].
template <class T>
BasicTensor<T> scatter_batch(const BasicTensor<T>& a, const std::vector<std::size_t>& index, std::size_t batch) {
  if (a.dim(0) != index.size()) throw DimensionError("scatter_batch index size mismatch");
  const std::size_t inner = a.numel() / std::max<std::size_t>(a.dim(0), 1);
  Shape out_shape = a.shape();
  out_shape[0] = batch;
  std::vector<T> out(batch * inner, T(0));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= batch) throw DimensionError("scatter_batch index out of range");
    for (std::size_t j = 0; j < inner; ++j) out[index[i] * inner + j] += a.data()[i * inner + j];
  }
  return record<T>(out_shape, std::move(out), "scatter_batch", {a},
                   [index](const BasicTensor<T>& g, const std::vector<bool>&) {
                     return std::vector<BasicTensor<T>>{select_batch(g, index)};
                   });
}

// ---------------------------------------------------------------------------
// Convolutions

/// A convolution geometry bound to the rank of the tensors it operates on
/// (2 or 3 spatial axes).
struct ConvPlan {
  kernels::ConvGeometry geom;
  std::size_t spatial_rank = 3;

  Shape spatial(const kernels::Extent3& e, std::size_t batch, std::size_t channels) const {
    Shape s{batch, channels};
    for (std::size_t a = 3 - spatial_rank; a < 3; ++a) s.push_back(e[a]);
    return s;
  }
  Shape input_shape(std::size_t batch) const { return spatial(geom.in, batch, geom.c_in); }
  Shape output_shape(std::size_t batch) const { return spatial(geom.out, batch, geom.c_out); }
  Shape weight_shape() const {
    Shape s{geom.c_out, geom.c_in};
    for (std::size_t a = 3 - spatial_rank; a < 3; ++a) s.push_back(geom.k[a]);
    return s;
  }
  kernels::ConvGeometry with_batch(std::size_t n) const {
    auto g = geom;
    g.batch = n;
    return g;
  }
};

namespace detail {

inline kernels::Extent3 extent3(const Shape& s, std::size_t first) {
  const std::size_t rank = s.size() - first;
  if (rank != 2 && rank != 3) throw DimensionError("convolution expects 2 or 3 spatial axes, got " + shape_str(s));
  kernels::Extent3 e{1, 1, 1};
  for (std::size_t i = 0; i < rank; ++i) e[3 - rank + i] = s[first + i];
  return e;
}

inline kernels::Extent3 iso3(std::size_t v, std::size_t rank, std::size_t neutral) {
  kernels::Extent3 e{neutral, neutral, neutral};
  for (std::size_t a = 3 - rank; a < 3; ++a) e[a] = v;
  return e;
}

}  // namespace detail

template <class T>
BasicTensor<T> conv_apply(const BasicTensor<T>& x, const BasicTensor<T>& w, const ConvPlan& plan);
template <class T>
BasicTensor<T> conv_adjoint_data(const BasicTensor<T>& y, const BasicTensor<T>& w, const ConvPlan& plan);
template <class T>
BasicTensor<T> conv_adjoint_weight(const BasicTensor<T>& x, const BasicTensor<T>& y, const ConvPlan& plan);

/// Forward strided convolution under an explicit plan.
template <class T>
BasicTensor<T> conv_apply(const BasicTensor<T>& x, const BasicTensor<T>& w, const ConvPlan& plan) {
  const std::size_t n = x.dim(0);
  if (x.shape() != plan.input_shape(n) || w.shape() != plan.weight_shape())
    throw DimensionError("conv: input " + shape_str(x.shape()) + " / weight " + shape_str(w.shape()) +
                         " do not match plan");
  const auto g = plan.with_batch(n);
  std::vector<T> out(n * g.c_out * g.out_volume());
  kernels::conv_forward(g, x.data().data(), w.data().data(), out.data());
  return record<T>(plan.output_shape(n), std::move(out), "conv", {x, w},
                   [x, w, plan](const BasicTensor<T>& gy, const std::vector<bool>& needs) {
                     BasicTensor<T> gx, gw;
                     if (needs[0]) gx = conv_adjoint_data(gy, w, plan);
                     if (needs[1]) gw = conv_adjoint_weight(x, gy, plan);
                     return std::vector<BasicTensor<T>>{gx, gw};
                   });
}

/// Adjoint of conv_apply in its input: the transpose convolution.
template <class T>
BasicTensor<T> conv_adjoint_data(const BasicTensor<T>& y, const BasicTensor<T>& w, const ConvPlan& plan) {
  const std::size_t n = y.dim(0);
  if (y.shape() != plan.output_shape(n) || w.shape() != plan.weight_shape())
    throw DimensionError("conv_transpose: input " + shape_str(y.shape()) + " / weight " + shape_str(w.shape()) +
                         " do not match plan");
  const auto g = plan.with_batch(n);
  std::vector<T> out(n * g.c_in * g.in_volume());
  kernels::conv_backward_data(g, y.data().data(), w.data().data(), out.data());
  return record<T>(plan.input_shape(n), std::move(out), "conv_transpose", {y, w},
                   [y, w, plan](const BasicTensor<T>& gx, const std::vector<bool>& needs) {
                     BasicTensor<T> gy, gw;
                     if (needs[0]) gy = conv_apply(gx, w, plan);
                     if (needs[1]) gw = conv_adjoint_weight(gx, y, plan);
                     return std::vector<BasicTensor<T>>{gy, gw};
                   });
}

/// Adjoint of conv_apply in its weights.
template <class T>
BasicTensor<T> conv_adjoint_weight(const BasicTensor<T>& x, const BasicTensor<T>& y, const ConvPlan& plan) {
  const std::size_t n = x.dim(0);
  if (x.shape() != plan.input_shape(n) || y.shape() != plan.output_shape(n))
    throw DimensionError("conv weight gradient: shapes do not match plan");
  const auto g = plan.with_batch(n);
  std::vector<T> out(g.weight_size());
  kernels::conv_backward_weight(g, x.data().data(), y.data().data(), out.data());
  return record<T>(plan.weight_shape(), std::move(out), "conv_weight_grad", {x, y},
                   [x, y, plan](const BasicTensor<T>& gw, const std::vector<bool>& needs) {
                     BasicTensor<T> gx, gy;
                     if (needs[0]) gx = conv_adjoint_data(y, gw, plan);
                     if (needs[1]) gy = conv_apply(x, gw, plan);
                     return std::vector<BasicTensor<T>>{gx, gy};
                   });
}

/// Strided convolution of x [N, C_in, spatial...] with w [C_out, C_in, k...]
/// (cubic kernel, equal stride and zero padding on every spatial axis).
template <class T>
BasicTensor<T> conv(const BasicTensor<T>& x, const BasicTensor<T>& w, std::size_t stride, std::size_t padding) {
  if (w.rank() != x.rank() || x.rank() < 4) throw DimensionError("conv: weight rank does not match input");
  const std::size_t rank = x.rank() - 2;
  if (w.dim(1) != x.dim(1))
    throw DimensionError("conv: input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
                         std::to_string(w.dim(1)));
  ConvPlan plan;
  plan.spatial_rank = rank;
  plan.geom = kernels::ConvGeometry::from_input(x.dim(0), x.dim(1), w.dim(0), detail::extent3(x.shape(), 2),
                                                detail::extent3(w.shape(), 2), detail::iso3(stride, rank, 1),
                                                detail::iso3(padding, rank, 0));
  return conv_apply(x, w, plan);
}

/// Transpose convolution of x [N, C_in, spatial...] with w [C_in, C_out, k...]:
/// scatter-accumulate each input voxel's kernel stamp at offset s*index, then
/// crop `crop` outer layers per face. Output extent s(l-1) + k - 2p.
template <class T>
BasicTensor<T> conv_transpose(const BasicTensor<T>& x, const BasicTensor<T>& w, std::size_t stride,
                              std::size_t crop) {
  if (w.rank() != x.rank() || x.rank() < 4) throw DimensionError("conv_transpose: weight rank does not match input");
  const std::size_t rank = x.rank() - 2;
  if (w.dim(0) != x.dim(1))
    throw DimensionError("conv_transpose: input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
                         std::to_string(w.dim(0)));
  ConvPlan plan;
  plan.spatial_rank = rank;
  // The weight layout [C_in, C_out, k...] is that of the forward convolution
  // mapping C_out channels to C_in.
  plan.geom = kernels::ConvGeometry::from_output(x.dim(0), w.dim(1), w.dim(0), detail::extent3(x.shape(), 2),
                                                 detail::extent3(w.shape(), 2), detail::iso3(stride, rank, 1),
                                                 detail::iso3(crop, rank, 0));
  return conv_adjoint_data(x, w, plan);
}

}  // namespace volsynth
