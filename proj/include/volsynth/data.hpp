#pragma once

// Segmented training images, phase volumes, one-hot encoding, patch sampling
// and axis-aligned slicing.

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "volsynth/error.hpp"
#include "volsynth/ops.hpp"
#include "volsynth/tensor.hpp"

namespace volsynth {

/// A segmented 2-D image; labels are row-major [y][x].
struct Micrograph {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t n_phases = 2;
  std::vector<std::uint8_t> labels;

  void validate() const {
    if (n_phases < 2) throw DataError("micrograph must declare at least 2 phases");
    if (labels.size() != width * height) throw DataError("micrograph label count does not match its extents");
    for (auto l : labels)
      if (l >= n_phases)
        throw DataError("label " + std::to_string(l) + " outside [0, " + std::to_string(n_phases) + ")");
  }
  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
};

/// A segmented volume with extents (depth z, height y, width x). Holds either
/// labels [z][y][x] or per-voxel phase probabilities [phase][z][y][x].
struct PhaseVolume {
  std::size_t depth = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t n_phases = 2;
  std::vector<std::uint8_t> labels;
  std::vector<double> probs;

  std::size_t voxels() const { return depth * height * width; }
  bool has_labels() const { return !labels.empty(); }
  bool has_probs() const { return !probs.empty(); }
  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * height + y) * width + x; }
  std::uint8_t at(std::size_t z, std::size_t y, std::size_t x) const { return labels[index(z, y, x)]; }

  void validate() const {
    if (n_phases < 2) throw DataError("volume must declare at least 2 phases");
    if (has_labels() == has_probs()) throw DataError("volume must hold exactly one of labels or probabilities");
    if (has_labels()) {
      if (labels.size() != voxels()) throw DataError("volume label count does not match its extents");
      for (auto l : labels)
        if (l >= n_phases)
          throw DataError("label " + std::to_string(l) + " outside [0, " + std::to_string(n_phases) + ")");
    } else {
      if (probs.size() != voxels() * n_phases) throw DataError("volume probability count does not match its extents");
      for (std::size_t v = 0; v < voxels(); ++v) {
        double s = 0;
        for (std::size_t c = 0; c < n_phases; ++c) {
          const double p = probs[c * voxels() + v];
          if (!(p >= -1e-12 && p <= 1 + 1e-12)) throw DataError("probability outside [0, 1]");
          s += p;
        }
        if (std::abs(s - 1.0) > 1e-6) throw DataError("probabilities do not sum to 1 at voxel " + std::to_string(v));
      }
    }
  }

  static PhaseVolume from_labels(std::size_t d, std::size_t h, std::size_t w, std::size_t n,
                                 std::vector<std::uint8_t> labels) {
    PhaseVolume v{d, h, w, n, std::move(labels), {}};
    v.validate();
    return v;
  }
};

enum class Axis : std::size_t { z = 0, y = 1, x = 2 };

inline const char* to_string(Axis a) {
  switch (a) {
    case Axis::z: return "z";
    case Axis::y: return "y";
    case Axis::x: return "x";
  }
  return "?";
}

inline Axis parse_axis(const std::string& s) {
  if (s == "z" || s == "0") return Axis::z;
  if (s == "y" || s == "1") return Axis::y;
  if (s == "x" || s == "2") return Axis::x;
  throw UsageError("unknown axis '" + s + "' (expected x, y or z)");
}

/// Training images assigned per axis (index 0 = z, 1 = y, 2 = x).
struct TrainingSet {
  std::vector<Micrograph> images;
  std::array<std::size_t, 3> axis_image{0, 0, 0};
  bool isotropic = true;

  const Micrograph& for_axis(Axis a) const { return images.at(axis_image[static_cast<std::size_t>(a)]); }

  void validate() const {
    if (images.empty()) throw DataError("training set has no images");
    for (auto i : axis_image)
      if (i >= images.size()) throw DataError("axis references a missing training image");
    if (isotropic && !(axis_image[0] == axis_image[1] && axis_image[1] == axis_image[2]))
      throw DataError("isotropic training requires one image for all three axes");
    for (const auto& m : images) {
      m.validate();
      if (m.n_phases != images.front().n_phases) throw DataError("training images disagree on n_phases");
    }
  }
};

// ---------------------------------------------------------------------------
// One-hot encoding

/// [1, n, H, W] with channel c equal to 1 where the label is c.
template <class T = double>
BasicTensor<T> one_hot(const Micrograph& m) {
  m.validate();
  const std::size_t hw = m.width * m.height;
  std::vector<T> data(m.n_phases * hw, T(0));
  for (std::size_t i = 0; i < hw; ++i) data[m.labels[i] * hw + i] = T(1);
  return BasicTensor<T>(Shape{1, m.n_phases, m.height, m.width}, std::move(data));
}

/// [1, n, D, H, W] for a labelled volume.
template <class T = double>
BasicTensor<T> one_hot(const PhaseVolume& v) {
  if (!v.has_labels()) throw DataError("one_hot needs a labelled volume");
  v.validate();
  const std::size_t n = v.voxels();
  std::vector<T> data(v.n_phases * n, T(0));
  for (std::size_t i = 0; i < n; ++i) data[v.labels[i] * n + i] = T(1);
  return BasicTensor<T>(Shape{1, v.n_phases, v.depth, v.height, v.width}, std::move(data));
}

/// Per-voxel argmax over phases; ties go to the lowest phase index.
inline PhaseVolume decode_phases(const PhaseVolume& v) {
  if (!v.has_probs()) throw DataError("decode_phases needs a probability volume");
  PhaseVolume out{v.depth, v.height, v.width, v.n_phases, std::vector<std::uint8_t>(v.voxels()), {}};
  const std::size_t n = v.voxels();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < v.n_phases; ++c)
      if (v.probs[c * n + i] > v.probs[best * n + i]) best = c;
    out.labels[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

/// Wraps a generator output [1, n, l, l, l] (or [n, l, l, l]) as a probability volume.
template <class T>
PhaseVolume probability_volume(const BasicTensor<T>& t) {
  const std::size_t off = t.rank() == 5 ? 1 : 0;
  if (t.rank() != 4 + off || (off && t.dim(0) != 1)) throw DimensionError("expected a single [n, D, H, W] volume");
  PhaseVolume v{t.dim(off + 1), t.dim(off + 2), t.dim(off + 3), t.dim(off), {}, {}};
  v.probs.assign(t.data().begin(), t.data().end());
  return v;
}

// ---------------------------------------------------------------------------
// Patch sampling

struct PatchCorner {
  std::size_t y = 0;
  std::size_t x = 0;
};

/// Uniformly random top-left corners of l x l patches.
template <class Rng>
std::vector<PatchCorner> sample_patch_corners(const Micrograph& m, std::size_t l, std::size_t count, Rng& rng) {
  if (l == 0 || m.width < l || m.height < l)
    throw DataError("micrograph " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                    " is smaller than patch size " + std::to_string(l));
  std::uniform_int_distribution<std::size_t> ys(0, m.height - l), xs(0, m.width - l);
  std::vector<PatchCorner> out(count);
  for (auto& c : out) {
    c.y = ys(rng);
    c.x = xs(rng);
  }
  return out;
}

/// Batch of one-hot patches [count, n, l, l]. With `augment`, each patch gets
/// a random quarter-turn rotation and an optional horizontal flip.
template <class T, class Rng>
BasicTensor<T> sample_patches(const Micrograph& m, std::size_t l, std::size_t count, Rng& rng, bool augment = false) {
  const auto corners = sample_patch_corners(m, l, count, rng);
  const std::size_t n = m.n_phases, ll = l * l;
  std::vector<T> data(count * n * ll, T(0));
  std::uniform_int_distribution<int> rot(0, 3), flip(0, 1);
  for (std::size_t b = 0; b < count; ++b) {
    const int r = augment ? rot(rng) : 0;
    const bool f = augment ? flip(rng) == 1 : false;
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t j = 0; j < l; ++j) {
        std::size_t si = i, sj = f ? l - 1 - j : j;
        for (int q = 0; q < r; ++q) {
          const std::size_t t = si;
          si = sj;
          sj = l - 1 - t;
        }
        const auto label = m.at(corners[b].y + si, corners[b].x + sj);
        data[(b * n + label) * ll + i * l + j] = T(1);
      }
  }
  return BasicTensor<T>(Shape{count, n, l, l}, std::move(data));
}

// ---------------------------------------------------------------------------
// Slicing

namespace detail {

// Plane of one [C, L, L, L] volume at `depth` along `axis`, written as [C, L, L].
template <class T>
void extract_plane(const T* vol, std::size_t c, std::size_t l, Axis axis, std::size_t depth, T* out) {
  const std::size_t ll = l * l, lll = ll * l;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* v = vol + ch * lll;
    T* o = out + ch * ll;
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t j = 0; j < l; ++j) {
        switch (axis) {
          case Axis::z: o[i * l + j] = v[depth * ll + i * l + j]; break;
          case Axis::y: o[i * l + j] = v[i * ll + depth * l + j]; break;
          case Axis::x: o[i * l + j] = v[i * ll + j * l + depth]; break;
        }
      }
  }
}

// Adjoint of extract_plane: accumulates a [C, L, L] plane into the volume.
template <class T>
void insert_plane(const T* plane, std::size_t c, std::size_t l, Axis axis, std::size_t depth, T* vol) {
  const std::size_t ll = l * l, lll = ll * l;
  for (std::size_t ch = 0; ch < c; ++ch) {
    T* v = vol + ch * lll;
    const T* p = plane + ch * ll;
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t j = 0; j < l; ++j) {
        switch (axis) {
          case Axis::z: v[depth * ll + i * l + j] += p[i * l + j]; break;
          case Axis::y: v[i * ll + depth * l + j] += p[i * l + j]; break;
          case Axis::x: v[i * ll + j * l + depth] += p[i * l + j]; break;
        }
      }
  }
}

inline void require_cube(const Shape& s) {
  if (s.size() != 5 || s[2] != s[3] || s[3] != s[4])
    throw DimensionError("slicing requires cubic volumes [N, C, l, l, l], got " + shape_str(s));
}

}  // namespace detail

template <class T>
BasicTensor<T> unslice_planes(const BasicTensor<T>& planes, const Shape& volume_shape, Axis axis,
                              const std::vector<std::size_t>& depths);

/// Differentiable slicing of volumes [N, C, l, l, l] into planes
/// [N * depths.size(), C, l, l], volume-major then depth order.
template <class T>
BasicTensor<T> slice_planes(const BasicTensor<T>& vol, Axis axis, const std::vector<std::size_t>& depths) {
  detail::require_cube(vol.shape());
  const std::size_t n = vol.dim(0), c = vol.dim(1), l = vol.dim(2), ll = l * l;
  for (auto d : depths)
    if (d >= l) throw DimensionError("slice depth outside the volume");
  std::vector<T> out(n * depths.size() * c * ll);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < depths.size(); ++i)
      detail::extract_plane(vol.data().data() + b * c * ll * l, c, l, axis, depths[i],
                            out.data() + (b * depths.size() + i) * c * ll);
  const Shape vshape = vol.shape();
  return record<T>(Shape{n * depths.size(), c, l, l}, std::move(out), "slice_planes", {vol},
                   [vshape, axis, depths](const BasicTensor<T>& g, const std::vector<bool>&) {
                     return std::vector<BasicTensor<T>>{unslice_planes(g, vshape, axis, depths)};
                   });
}

/// Adjoint of slice_planes.
template <class T>
BasicTensor<T> unslice_planes(const BasicTensor<T>& planes, const Shape& volume_shape, Axis axis,
                              const std::vector<std::size_t>& depths) {
  detail::require_cube(volume_shape);
  const std::size_t n = volume_shape[0], c = volume_shape[1], l = volume_shape[2], ll = l * l;
  if (planes.shape() != Shape{n * depths.size(), c, l, l}) throw DimensionError("unslice_planes: shape mismatch");
  std::vector<T> out(numel(volume_shape), T(0));
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < depths.size(); ++i)
      detail::insert_plane(planes.data().data() + (b * depths.size() + i) * c * ll, c, l, axis, depths[i],
                           out.data() + b * c * ll * l);
  return record<T>(volume_shape, std::move(out), "unslice_planes", {planes},
                   [axis, depths](const BasicTensor<T>& g, const std::vector<bool>&) {
                     return std::vector<BasicTensor<T>>{slice_planes(g, axis, depths)};
                   });
}

template <class T>
struct Slice {
  Axis axis;
  std::size_t depth;
  BasicTensor<T> plane;  // [n, l, l]
};

/// Every unit-increment plane of a cubic volume [n, l, l, l] along the
/// requested axes: l slices per axis.
template <class T>
std::vector<Slice<T>> slice_volume(const BasicTensor<T>& f, const std::vector<Axis>& axes = {Axis::z, Axis::y, Axis::x}) {
  if (f.rank() != 4 || f.dim(1) != f.dim(2) || f.dim(2) != f.dim(3))
    throw DimensionError("slice_volume requires a cubic [n, l, l, l] volume, got " + shape_str(f.shape()));
  NoGradGuard no_grad;
  const std::size_t n = f.dim(0), l = f.dim(1);
  const auto vol = reshape(f, Shape{1, n, l, l, l});
  std::vector<std::size_t> depths(l);
  std::iota(depths.begin(), depths.end(), std::size_t{0});
  std::vector<Slice<T>> out;
  for (Axis a : axes) {
    const auto planes = slice_planes(vol, a, depths);
    const std::size_t plane_size = n * l * l;
    for (std::size_t d = 0; d < l; ++d) {
      std::vector<T> data(planes.data().begin() + static_cast<long>(d * plane_size),
                          planes.data().begin() + static_cast<long>((d + 1) * plane_size));
      out.push_back({a, d, BasicTensor<T>(Shape{n, l, l}, std::move(data))});
    }
  }
  return out;
}

}  // namespace volsynth
