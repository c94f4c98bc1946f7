#pragma once

// Raw strided convolution kernels over 3 spatial axes (2-D convolutions use a
// depth axis of extent 1). Three entry points form a closed set under
// differentiation: forward, data-adjoint (the transpose convolution) and the
// weight gradient.

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "volsynth/error.hpp"
#include "volsynth/parallel.hpp"

namespace volsynth::kernels {

using Extent3 = std::array<std::size_t, 3>;

/// Geometry of a forward convolution. `in` is the large (padded) side, `out`
/// the strided side; a transpose convolution runs the same geometry backwards.
struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t c_in = 1;
  std::size_t c_out = 1;
  Extent3 in{1, 1, 1};
  Extent3 out{1, 1, 1};
  Extent3 k{1, 1, 1};
  Extent3 s{1, 1, 1};
  Extent3 p{0, 0, 0};

  std::size_t in_volume() const { return in[0] * in[1] * in[2]; }
  std::size_t out_volume() const { return out[0] * out[1] * out[2]; }
  std::size_t kernel_volume() const { return k[0] * k[1] * k[2]; }
  std::size_t weight_size() const { return c_out * c_in * kernel_volume(); }

  /// Forward shape law: out = floor((in + 2p - k) / s) + 1.
  static ConvGeometry from_input(std::size_t batch, std::size_t c_in, std::size_t c_out, Extent3 in,
                                 Extent3 k, Extent3 s, Extent3 p) {
    ConvGeometry g{batch, c_in, c_out, in, {}, k, s, p};
    for (int a = 0; a < 3; ++a) {
      if (k[a] == 0 || s[a] == 0) throw DimensionError("kernel and stride must be positive");
      if (in[a] + 2 * p[a] < k[a])
        throw DimensionError("convolution input extent " + std::to_string(in[a]) + " too small for kernel " +
                             std::to_string(k[a]) + " with padding " + std::to_string(p[a]));
      g.out[a] = (in[a] + 2 * p[a] - k[a]) / s[a] + 1;
    }
    return g;
  }

  /// Transpose shape law: the conv input side is s(l-1) + k - 2p.
  static ConvGeometry from_output(std::size_t batch, std::size_t c_in, std::size_t c_out, Extent3 out,
                                  Extent3 k, Extent3 s, Extent3 p) {
    ConvGeometry g{batch, c_in, c_out, {}, out, k, s, p};
    for (int a = 0; a < 3; ++a) {
      if (k[a] == 0 || s[a] == 0) throw DimensionError("kernel and stride must be positive");
      const long long ext = static_cast<long long>(s[a]) * (static_cast<long long>(out[a]) - 1) +
                            static_cast<long long>(k[a]) - 2 * static_cast<long long>(p[a]);
      if (out[a] == 0 || ext <= 0)
        throw DimensionError("transpose convolution output extent " + std::to_string(ext) + " is not positive");
      g.in[a] = static_cast<std::size_t>(ext);
    }
    return g;
  }
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// col[(ci*K + kk) * P + o] = x[ci, o*s - p + kk] (zero outside).
template <class T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::size_t K = g.kernel_volume(), P = g.out_volume();
  for (std::size_t ci = 0; ci < g.c_in; ++ci) {
    const T* xc = x + ci * g.in_volume();
    for (std::size_t kz = 0; kz < g.k[0]; ++kz)
      for (std::size_t ky = 0; ky < g.k[1]; ++ky)
        for (std::size_t kx = 0; kx < g.k[2]; ++kx) {
          const std::size_t kk = (kz * g.k[1] + ky) * g.k[2] + kx;
          T* row = col + (ci * K + kk) * P;
          std::size_t o = 0;
          for (std::size_t oz = 0; oz < g.out[0]; ++oz) {
            const long long iz = static_cast<long long>(oz * g.s[0] + kz) - static_cast<long long>(g.p[0]);
            const bool z_ok = iz >= 0 && iz < static_cast<long long>(g.in[0]);
            for (std::size_t oy = 0; oy < g.out[1]; ++oy) {
              const long long iy = static_cast<long long>(oy * g.s[1] + ky) - static_cast<long long>(g.p[1]);
              const bool zy_ok = z_ok && iy >= 0 && iy < static_cast<long long>(g.in[1]);
              const T* xrow = zy_ok ? xc + (static_cast<std::size_t>(iz) * g.in[1] + static_cast<std::size_t>(iy)) * g.in[2]
                                    : nullptr;
              for (std::size_t ox = 0; ox < g.out[2]; ++ox, ++o) {
                const long long ix = static_cast<long long>(ox * g.s[2] + kx) - static_cast<long long>(g.p[2]);
                row[o] = (xrow && ix >= 0 && ix < static_cast<long long>(g.in[2])) ? xrow[ix] : T(0);
              }
            }
          }
        }
  }
}

// Adjoint of im2col: accumulates col entries back into x (x must be zeroed).
template <class T>
void col2im(const ConvGeometry& g, const T* col, T* x) {
  const std::size_t K = g.kernel_volume(), P = g.out_volume();
  for (std::size_t ci = 0; ci < g.c_in; ++ci) {
    T* xc = x + ci * g.in_volume();
    for (std::size_t kz = 0; kz < g.k[0]; ++kz)
      for (std::size_t ky = 0; ky < g.k[1]; ++ky)
        for (std::size_t kx = 0; kx < g.k[2]; ++kx) {
          const std::size_t kk = (kz * g.k[1] + ky) * g.k[2] + kx;
          const T* row = col + (ci * K + kk) * P;
          std::size_t o = 0;
          for (std::size_t oz = 0; oz < g.out[0]; ++oz) {
            const long long iz = static_cast<long long>(oz * g.s[0] + kz) - static_cast<long long>(g.p[0]);
            const bool z_ok = iz >= 0 && iz < static_cast<long long>(g.in[0]);
            for (std::size_t oy = 0; oy < g.out[1]; ++oy) {
              const long long iy = static_cast<long long>(oy * g.s[1] + ky) - static_cast<long long>(g.p[1]);
              if (!(z_ok && iy >= 0 && iy < static_cast<long long>(g.in[1]))) {
                o += g.out[2];
                continue;
              }
              T* xrow = xc + (static_cast<std::size_t>(iz) * g.in[1] + static_cast<std::size_t>(iy)) * g.in[2];
              for (std::size_t ox = 0; ox < g.out[2]; ++ox, ++o) {
                const long long ix = static_cast<long long>(ox * g.s[2] + kx) - static_cast<long long>(g.p[2]);
                if (ix >= 0 && ix < static_cast<long long>(g.in[2])) xrow[ix] += row[o];
              }
            }
          }
        }
  }
}

}  // namespace detail

/// y[n, co, o] = sum_{ci, kk} w[co, ci, kk] * x[n, ci, o*s - p + kk]
template <class T>
void conv_forward(const ConvGeometry& g, const T* x, const T* w, T* y) {
  using M = detail::RowMat<T>;
  const std::size_t CK = g.c_in * g.kernel_volume(), P = g.out_volume();
  Eigen::Map<const M> W(w, static_cast<Eigen::Index>(g.c_out), static_cast<Eigen::Index>(CK));
  parallel_for(g.batch, [&](std::size_t n) {
    std::vector<T> col(CK * P);
    detail::im2col(g, x + n * g.c_in * g.in_volume(), col.data());
    Eigen::Map<const M> C(col.data(), static_cast<Eigen::Index>(CK), static_cast<Eigen::Index>(P));
    Eigen::Map<M> Y(y + n * g.c_out * P, static_cast<Eigen::Index>(g.c_out), static_cast<Eigen::Index>(P));
    Y.noalias() = W * C;
  });
}

/// Adjoint of conv_forward in x; this is the transpose convolution.
template <class T>
void conv_backward_data(const ConvGeometry& g, const T* y, const T* w, T* x) {
  using M = detail::RowMat<T>;
  const std::size_t CK = g.c_in * g.kernel_volume(), P = g.out_volume();
  Eigen::Map<const M> W(w, static_cast<Eigen::Index>(g.c_out), static_cast<Eigen::Index>(CK));
  parallel_for(g.batch, [&](std::size_t n) {
    M col(static_cast<Eigen::Index>(CK), static_cast<Eigen::Index>(P));
    Eigen::Map<const M> Y(y + n * g.c_out * P, static_cast<Eigen::Index>(g.c_out), static_cast<Eigen::Index>(P));
    col.noalias() = W.transpose() * Y;
    T* xn = x + n * g.c_in * g.in_volume();
    std::fill(xn, xn + g.c_in * g.in_volume(), T(0));
    detail::col2im(g, col.data(), xn);
  });
}

/// Adjoint of conv_forward in w: dw[co, ci, kk] = sum_{n, o} y[n, co, o] * x[n, ci, o*s - p + kk].
/// Samples are reduced in a fixed chunk order independent of the thread count.
template <class T>
void conv_backward_weight(const ConvGeometry& g, const T* x, const T* y, T* dw) {
  using M = detail::RowMat<T>;
  const std::size_t CK = g.c_in * g.kernel_volume(), P = g.out_volume();
  constexpr std::size_t kChunks = 8;
  const std::size_t chunks = std::min(kChunks, g.batch);
  std::vector<M> partial(chunks, M::Zero(static_cast<Eigen::Index>(g.c_out), static_cast<Eigen::Index>(CK)));
  parallel_for(chunks, [&](std::size_t c) {
    std::vector<T> col(CK * P);
    for (std::size_t n = c; n < g.batch; n += chunks) {
      detail::im2col(g, x + n * g.c_in * g.in_volume(), col.data());
      Eigen::Map<const M> C(col.data(), static_cast<Eigen::Index>(CK), static_cast<Eigen::Index>(P));
      Eigen::Map<const M> Y(y + n * g.c_out * P, static_cast<Eigen::Index>(g.c_out), static_cast<Eigen::Index>(P));
      partial[c].noalias() += Y * C.transpose();
    }
  });
  Eigen::Map<M> DW(dw, static_cast<Eigen::Index>(g.c_out), static_cast<Eigen::Index>(CK));
  DW.setZero();
  for (const auto& part : partial) DW += part;
}

}  // namespace volsynth::kernels
