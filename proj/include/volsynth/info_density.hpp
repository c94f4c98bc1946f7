#pragma once

// Information density of transpose-convolution chains: how many kernel
// parameter applications reach each output location, the uniformity rules on
// {k, s, p}, and the kernel-element periodicity of a generator.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "volsynth/conv_spec.hpp"
#include "volsynth/error.hpp"

namespace volsynth::density {

/// Integer count per output location, row-major over `extents`.
struct InfoDensityMap {
  std::vector<std::size_t> extents;
  std::vector<std::int64_t> counts;

  std::size_t size() const { return counts.size(); }
  std::int64_t max() const { return counts.empty() ? 0 : *std::max_element(counts.begin(), counts.end()); }
  std::int64_t min() const { return counts.empty() ? 0 : *std::min_element(counts.begin(), counts.end()); }
  bool uniform() const { return min() == max(); }
  std::int64_t at(const std::vector<std::size_t>& idx) const {
    std::size_t off = 0;
    for (std::size_t a = 0; a < extents.size(); ++a) off = off * extents[a] + idx[a];
    return counts[off];
  }
  friend bool operator==(const InfoDensityMap&, const InfoDensityMap&) = default;
};

enum class Diagnosis { uniform, edge_gradient, checkerboard, no_overlap };

inline const char* to_string(Diagnosis d) {
  switch (d) {
    case Diagnosis::uniform: return "uniform";
    case Diagnosis::edge_gradient: return "edge_gradient";
    case Diagnosis::checkerboard: return "checkerboard";
    case Diagnosis::no_overlap: return "no_overlap";
  }
  return "unknown";
}

struct RuleReport {
  ConvSpec spec;
  bool rule1_ok = false;  // s < k
  bool rule2_ok = false;  // k mod s == 0
  bool rule3_ok = false;  // p >= k - s
  Diagnosis diagnosis = Diagnosis::no_overlap;
};

/// Diagnosis precedence: missing overlap, then checkerboard, then edge gradient.
inline RuleReport check_rules(const ConvSpec& spec) {
  RuleReport r;
  r.spec = spec;
  r.rule1_ok = spec.s < spec.k;
  r.rule2_ok = spec.s > 0 && spec.k % spec.s == 0;
  r.rule3_ok = spec.p + spec.s >= spec.k;
  if (!r.rule1_ok)
    r.diagnosis = Diagnosis::no_overlap;
  else if (!r.rule2_ok)
    r.diagnosis = Diagnosis::checkerboard;
  else if (!r.rule3_ok)
    r.diagnosis = Diagnosis::edge_gradient;
  else
    r.diagnosis = Diagnosis::uniform;
  return r;
}

inline bool is_prime(std::size_t n) {
  if (n < 2) return false;
  for (std::size_t d = 2; d * d <= n; ++d)
    if (n % d == 0) return false;
  return true;
}

/// Every {k, s, p} with 2 <= k <= k_max, k composite, s >= 2, satisfying all
/// three rules with minimal cropping p = k - s. Ordered by k, then s descending.
inline std::vector<ConvSpec> enumerate_practical_sets(std::size_t k_max) {
  if (k_max < 2) throw UsageError("enumerate_practical_sets requires k_max >= 2");
  std::vector<ConvSpec> out;
  for (std::size_t k = 2; k <= k_max; ++k) {
    if (is_prime(k)) continue;
    for (std::size_t s = k - 1; s >= 2; --s) {
      ConvSpec c{k, s, k - s};
      if (check_rules(c).diagnosis == Diagnosis::uniform) out.push_back(c);
    }
  }
  return out;
}

/// Period, in output planes, of identical kernel-element combinations: the product of strides.
inline std::size_t kernel_periodicity(const std::vector<ConvSpec>& specs) {
  std::size_t p = 1;
  for (const auto& c : specs) {
    if (c.s < 1) throw UsageError("stride must be >= 1");
    p *= c.s;
  }
  return p;
}

// ---------------------------------------------------------------------------
// 1-D closed form

/// counts[j] = #{ i in [0, extent) : 0 <= j + p - s*i < k } for the cropped output.
inline std::vector<std::int64_t> density_profile_1layer(std::size_t input_extent, const ConvSpec& spec) {
  if (input_extent < 1) throw UsageError("input extent must be >= 1");
  spec.validate();
  const long long out = transpose_extent(static_cast<long long>(input_extent), spec);
  if (out <= 0) throw DimensionError("transpose convolution " + to_string(spec) + " collapses extent " +
                                     std::to_string(input_extent));
  std::vector<std::int64_t> counts(static_cast<std::size_t>(out), 0);
  const long long k = static_cast<long long>(spec.k), s = static_cast<long long>(spec.s),
                  p = static_cast<long long>(spec.p);
  for (long long j = 0; j < out; ++j)
    for (long long i = 0; i < static_cast<long long>(input_extent); ++i) {
      const long long e = j + p - s * i;
      if (e >= 0 && e < k) ++counts[static_cast<std::size_t>(j)];
    }
  return counts;
}

/// Chain of the closed form: counts_n[j] = sum over contributing i of counts_{n-1}[i].
inline std::vector<std::int64_t> density_profile_chain(std::size_t input_extent, const std::vector<ConvSpec>& specs) {
  std::vector<std::int64_t> prev(input_extent, 1);
  for (const auto& spec : specs) {
    const auto pattern = density_profile_1layer(prev.size(), spec);  // validates extents
    std::vector<std::int64_t> next(pattern.size(), 0);
    const long long k = static_cast<long long>(spec.k), s = static_cast<long long>(spec.s),
                    p = static_cast<long long>(spec.p);
    for (long long j = 0; j < static_cast<long long>(next.size()); ++j)
      for (long long i = 0; i < static_cast<long long>(prev.size()); ++i) {
        const long long e = j + p - s * i;
        if (e >= 0 && e < k) next[static_cast<std::size_t>(j)] += prev[static_cast<std::size_t>(i)];
      }
    prev = std::move(next);
  }
  return prev;
}

/// N-D map as the outer product of identical per-axis profiles.
inline InfoDensityMap outer_product(const std::vector<std::int64_t>& profile, std::size_t dims) {
  InfoDensityMap m;
  m.extents.assign(dims, profile.size());
  m.counts.assign(1, 1);
  for (std::size_t d = 0; d < dims; ++d) {
    std::vector<std::int64_t> next;
    next.reserve(m.counts.size() * profile.size());
    for (auto c : m.counts)
      for (auto q : profile) next.push_back(c * q);
    m.counts = std::move(next);
  }
  return m;
}

inline InfoDensityMap density_map_1layer(std::size_t input_extent, const ConvSpec& spec, std::size_t dims = 2) {
  return outer_product(density_profile_1layer(input_extent, spec), dims);
}

// ---------------------------------------------------------------------------
// N-D scatter simulation

/// One transpose convolution with an all-ones kernel applied to an integer map:
/// every input location adds its value over a k^dims stamp at offset s*index,
/// then p layers are cropped from each face.
inline InfoDensityMap scatter_ones(const InfoDensityMap& in, const ConvSpec& spec) {
  spec.validate();
  const std::size_t dims = in.extents.size();
  std::vector<std::size_t> full(dims), out_ext(dims);
  for (std::size_t a = 0; a < dims; ++a) {
    const long long e = transpose_extent(static_cast<long long>(in.extents[a]), spec);
    if (e <= 0) throw DimensionError("transpose convolution " + to_string(spec) + " collapses extent " +
                                     std::to_string(in.extents[a]));
    out_ext[a] = static_cast<std::size_t>(e);
    full[a] = spec.s * (in.extents[a] - 1) + spec.k;
  }
  const std::size_t full_size = std::accumulate(full.begin(), full.end(), std::size_t{1}, std::multiplies<>());
  std::vector<std::int64_t> acc(full_size, 0);
  std::vector<std::size_t> idx(dims, 0), kidx(dims, 0);
  const std::size_t stamp = [&] {
    std::size_t v = 1;
    for (std::size_t a = 0; a < dims; ++a) v *= spec.k;
    return v;
  }();
  for (std::size_t flat = 0; flat < in.counts.size(); ++flat) {
    std::size_t rem = flat;
    for (std::size_t a = dims; a-- > 0;) {
      idx[a] = rem % in.extents[a];
      rem /= in.extents[a];
    }
    const auto v = in.counts[flat];
    if (v == 0) continue;
    for (std::size_t t = 0; t < stamp; ++t) {
      std::size_t r = t, off = 0;
      for (std::size_t a = dims; a-- > 0;) {
        kidx[a] = r % spec.k;
        r /= spec.k;
      }
      for (std::size_t a = 0; a < dims; ++a) off = off * full[a] + idx[a] * spec.s + kidx[a];
      acc[off] += v;
    }
  }
  InfoDensityMap out;
  out.extents = out_ext;
  out.counts.resize(std::accumulate(out_ext.begin(), out_ext.end(), std::size_t{1}, std::multiplies<>()));
  for (std::size_t flat = 0; flat < out.counts.size(); ++flat) {
    std::size_t rem = flat, off = 0;
    for (std::size_t a = dims; a-- > 0;) {
      idx[a] = rem % out_ext[a];
      rem /= out_ext[a];
    }
    for (std::size_t a = 0; a < dims; ++a) off = off * full[a] + idx[a] + spec.p;
    out.counts[flat] = acc[off];
  }
  return out;
}

/// Counts propagated through a chain: each layer scatters the previous layer's map.
inline InfoDensityMap density_map_chain(std::size_t input_extent, const std::vector<ConvSpec>& specs,
                                        std::size_t dims = 2) {
  if (input_extent < 1) throw UsageError("input extent must be >= 1");
  InfoDensityMap m;
  m.extents.assign(dims, input_extent);
  m.counts.assign(std::accumulate(m.extents.begin(), m.extents.end(), std::size_t{1}, std::multiplies<>()), 1);
  for (const auto& spec : specs) m = scatter_ones(m, spec);
  return m;
}

/// Contribution of one input stripe (all locations whose last coordinate is
/// `source_index`) to every output location of an all-ones-kernel chain.
inline InfoDensityMap influence_map(const std::vector<ConvSpec>& specs, std::size_t input_extent,
                                    std::size_t source_index, std::size_t dims = 2) {
  if (source_index >= input_extent) throw UsageError("influence source outside the input");
  InfoDensityMap m;
  m.extents.assign(dims, input_extent);
  m.counts.assign(std::accumulate(m.extents.begin(), m.extents.end(), std::size_t{1}, std::multiplies<>()), 0);
  for (std::size_t flat = 0; flat < m.counts.size(); ++flat)
    if (flat % input_extent == source_index) m.counts[flat] = 1;
  for (const auto& spec : specs) m = scatter_ones(m, spec);
  return m;
}

// ---------------------------------------------------------------------------
// Striped-kernel periodicity simulation

/// 1-D chain applied to an all-ones input where layer n's kernel element e has
/// value kernel_values[n][e]. Arithmetic wraps modulo 2^64, so large random
/// values keep distinct kernel-element combinations distinguishable.
inline std::vector<std::uint64_t> striped_profile(const std::vector<ConvSpec>& specs, std::size_t input_extent,
                                                  const std::vector<std::vector<std::uint64_t>>& kernel_values) {
  if (kernel_values.size() != specs.size()) throw UsageError("one kernel value list per layer required");
  std::vector<std::uint64_t> prev(input_extent, 1);
  for (std::size_t n = 0; n < specs.size(); ++n) {
    const auto& spec = specs[n];
    if (kernel_values[n].size() != spec.k) throw UsageError("kernel value list must have k entries");
    const long long out = transpose_extent(static_cast<long long>(prev.size()), spec);
    if (out <= 0) throw DimensionError("transpose convolution collapses extent");
    const std::size_t full = spec.s * (prev.size() - 1) + spec.k;
    std::vector<std::uint64_t> acc(full, 0);
    for (std::size_t i = 0; i < prev.size(); ++i)
      for (std::size_t e = 0; e < spec.k; ++e) acc[i * spec.s + e] += prev[i] * kernel_values[n][e];
    prev.assign(acc.begin() + static_cast<long long>(spec.p), acc.begin() + static_cast<long long>(spec.p) + out);
  }
  return prev;
}

/// Kernel columns valued 1, 2, ..., k in every layer.
inline std::vector<std::uint64_t> striped_profile(const std::vector<ConvSpec>& specs, std::size_t input_extent) {
  std::vector<std::vector<std::uint64_t>> values;
  for (const auto& c : specs) {
    std::vector<std::uint64_t> v(c.k);
    std::iota(v.begin(), v.end(), 1);
    values.push_back(std::move(v));
  }
  return striped_profile(specs, input_extent, values);
}

/// Smallest P >= 1 with profile[j] == profile[j + P] for every valid j
/// (the profile length when no shorter repeat exists).
template <class V>
std::size_t measured_repeat_distance(const std::vector<V>& profile) {
  for (std::size_t P = 1; P < profile.size(); ++P) {
    bool ok = true;
    for (std::size_t j = 0; j + P < profile.size() && ok; ++j) ok = profile[j] == profile[j + P];
    if (ok) return P;
  }
  return profile.size();
}

/// Shown with reports: resize-convolution generators are out of scope here.
inline constexpr const char* kResizeConvolutionNote =
    "resize-convolution generators are not analyzed; with zero padding they show low density near edges, "
    "and removing padding needs a latent input of at least 8 voxels per axis";

}  // namespace volsynth::density
