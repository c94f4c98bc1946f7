#pragma once

// Microstructure metrics on labelled voxel volumes: phase volume fractions,
// axis-aligned two-point correlation, triple phase boundary density and
// relative diffusivity from a steady-state diffusion solve.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "volsynth/data.hpp"
#include "volsynth/error.hpp"
#include "volsynth/parallel.hpp"

namespace volsynth::metrics {

namespace detail {
inline void require_labels(const PhaseVolume& v, const char* op) {
  if (!v.has_labels()) throw DataError(std::string(op) + " needs a labelled volume (decode probabilities first)");
  if (v.voxels() == 0) throw DataError(std::string(op) + " on an empty volume");
}

inline std::array<std::size_t, 3> extents(const PhaseVolume& v) { return {v.depth, v.height, v.width}; }
}  // namespace detail

/// Fraction of voxels carrying each phase label.
inline std::vector<double> volume_fraction(const PhaseVolume& v) {
  detail::require_labels(v, "volume_fraction");
  std::vector<std::size_t> counts(v.n_phases, 0);
  for (auto l : v.labels) {
    if (l >= v.n_phases) throw DataError("label outside [0, n_phases)");
    ++counts[l];
  }
  std::vector<double> out(v.n_phases);
  for (std::size_t p = 0; p < v.n_phases; ++p)
    out[p] = static_cast<double>(counts[p]) / static_cast<double>(v.voxels());
  return out;
}

inline std::vector<double> volume_fraction(const Micrograph& m) {
  return volume_fraction(PhaseVolume{1, m.height, m.width, m.n_phases, m.labels, {}});
}

/// Index of the most frequent phase (lowest index on ties).
inline std::size_t majority_phase(const std::vector<double>& fractions) {
  return static_cast<std::size_t>(std::max_element(fractions.begin(), fractions.end()) - fractions.begin());
}

struct S2Point {
  std::size_t r;
  double value;
};

/// S(r)/S(0) for r = 0..r_max, where S(r) is the probability that two voxels
/// a lag r apart along one axis both carry `phase`, averaged over the three
/// axes, and S(0) is the phase's volume fraction. An absent phase gives an
/// all-zero curve.
inline std::vector<S2Point> two_point_correlation(const PhaseVolume& v, std::size_t phase, std::size_t r_max) {
  detail::require_labels(v, "two_point_correlation");
  if (phase >= v.n_phases) throw UsageError("phase " + std::to_string(phase) + " outside [0, n_phases)");
  const auto ext = detail::extents(v);
  const std::size_t min_ext = *std::min_element(ext.begin(), ext.end());
  if (r_max >= min_ext)
    throw UsageError("r_max " + std::to_string(r_max) + " must be below the smallest extent " + std::to_string(min_ext));
  std::vector<std::uint8_t> ind(v.voxels());
  std::size_t total = 0;
  for (std::size_t i = 0; i < ind.size(); ++i) total += ind[i] = v.labels[i] == phase;
  const double phi = static_cast<double>(total) / static_cast<double>(v.voxels());
  std::vector<S2Point> out;
  const std::size_t strides[3] = {v.height * v.width, v.width, 1};
  for (std::size_t r = 0; r <= r_max; ++r) {
    double s = 0;
    for (std::size_t a = 0; a < 3; ++a) {
      std::size_t hits = 0;
      for (std::size_t z = 0; z < v.depth; ++z)
        for (std::size_t y = 0; y < v.height; ++y)
          for (std::size_t x = 0; x < v.width; ++x) {
            const std::size_t c[3] = {z, y, x};
            if (c[a] + r >= ext[a]) continue;
            const std::size_t i = v.index(z, y, x);
            hits += ind[i] & ind[i + r * strides[a]];
          }
      std::size_t pairs = v.voxels() / ext[a] * (ext[a] - r);
      s += static_cast<double>(hits) / static_cast<double>(pairs);
    }
    s /= 3.0;
    out.push_back({r, phi > 0 ? (r == 0 ? 1.0 : s / phi) : 0.0});
  }
  return out;
}

/// Number of triple phase boundary sites per voxel. By default a site is an
/// interior lattice edge whose 4 incident voxels carry at least three
/// distinct phases; with `corners` it is an interior lattice vertex whose 8
/// incident voxels do.
inline double tpb_density(const PhaseVolume& v, bool corners = false) {
  detail::require_labels(v, "tpb_density");
  if (v.n_phases < 3) throw UsageError("triple phase boundaries need at least 3 phases");
  auto distinct3 = [](const std::uint8_t* l, std::size_t n) {
    std::uint8_t seen[3];
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i) {
      bool dup = false;
      for (std::size_t j = 0; j < k; ++j) dup = dup || seen[j] == l[i];
      if (!dup) {
        if (k == 2) return true;
        seen[k++] = l[i];
      }
    }
    return false;
  };
  const std::size_t D = v.depth, H = v.height, W = v.width;
  std::size_t count = 0;
  if (corners) {
    for (std::size_t z = 1; z < D; ++z)
      for (std::size_t y = 1; y < H; ++y)
        for (std::size_t x = 1; x < W; ++x) {
          std::uint8_t l[8];
          std::size_t q = 0;
          for (std::size_t dz = 0; dz < 2; ++dz)
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx) l[q++] = v.at(z - dz, y - dy, x - dx);
          count += distinct3(l, 8);
        }
  } else {
    // Edges along x, y and z: the four voxels around each interior edge.
    for (std::size_t z = 1; z < D; ++z)
      for (std::size_t y = 1; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const std::uint8_t l[4] = {v.at(z - 1, y - 1, x), v.at(z - 1, y, x), v.at(z, y - 1, x), v.at(z, y, x)};
          count += distinct3(l, 4);
        }
    for (std::size_t z = 1; z < D; ++z)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 1; x < W; ++x) {
          const std::uint8_t l[4] = {v.at(z - 1, y, x - 1), v.at(z - 1, y, x), v.at(z, y, x - 1), v.at(z, y, x)};
          count += distinct3(l, 4);
        }
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t y = 1; y < H; ++y)
        for (std::size_t x = 1; x < W; ++x) {
          const std::uint8_t l[4] = {v.at(z, y - 1, x - 1), v.at(z, y - 1, x), v.at(z, y, x - 1), v.at(z, y, x)};
          count += distinct3(l, 4);
        }
  }
  return static_cast<double>(count) / static_cast<double>(v.voxels());
}

// ---------------------------------------------------------------------------
// Relative diffusivity

struct DiffusionOptions {
  /// Over-relaxation factor of the red-black Gauss-Seidel sweeps.
  double omega = 1.9;
  std::size_t max_iterations = 200000;
  /// Relative inlet/outlet flux mismatch required for convergence.
  double flux_tolerance = 1e-2;
  /// Relative change of the mean flux between sweeps required for convergence.
  double change_tolerance = 1e-4;
};

struct DiffusionResult {
  double d_rel = 0;
  bool percolates = false;
  std::size_t iterations = 0;
  double flux_in = 0;
  double flux_out = 0;
};

/// Steady diffusion through the voxels of `phase` between a unit-concentration
/// inlet face and a zero-concentration outlet face normal to `direction`; all
/// other boundaries and phase interfaces are closed. Face reservoirs sit half
/// a voxel from the first and last layers. Returns D_eff / D_0 =
/// flux * length / (area * 1), or exactly 0 when no path connects the faces.
inline DiffusionResult relative_diffusivity(const PhaseVolume& v, std::size_t phase, Axis direction,
                                            const DiffusionOptions& opt = {}) {
  detail::require_labels(v, "relative_diffusivity");
  if (phase >= v.n_phases) throw UsageError("phase " + std::to_string(phase) + " outside [0, n_phases)");
  if (!(opt.omega > 0 && opt.omega < 2)) throw UsageError("relaxation factor must lie in (0, 2)");
  const auto ext = detail::extents(v);
  const std::size_t ax = static_cast<std::size_t>(direction);
  const std::size_t L = ext[ax], n = v.voxels(), area = n / L;
  const std::size_t stride[3] = {v.height * v.width, v.width, 1};
  auto coord = [&](std::size_t i, std::size_t a) { return (i / stride[a]) % ext[a]; };

  // Connected components of the phase (6-connectivity), then keep those that
  // touch both faces.
  std::vector<std::int64_t> comp(n, -1);
  std::vector<std::uint8_t> touches_in, touches_out;
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < n; ++s) {
    if (v.labels[s] != phase || comp[s] >= 0) continue;
    const auto id = static_cast<std::int64_t>(touches_in.size());
    touches_in.push_back(0);
    touches_out.push_back(0);
    comp[s] = id;
    stack.push_back(s);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const std::size_t c = coord(i, ax);
      if (c == 0) touches_in[id] = 1;
      if (c + 1 == L) touches_out[id] = 1;
      for (std::size_t a = 0; a < 3; ++a) {
        const std::size_t ca = coord(i, a);
        if (ca > 0 && v.labels[i - stride[a]] == phase && comp[i - stride[a]] < 0) {
          comp[i - stride[a]] = id;
          stack.push_back(i - stride[a]);
        }
        if (ca + 1 < ext[a] && v.labels[i + stride[a]] == phase && comp[i + stride[a]] < 0) {
          comp[i + stride[a]] = id;
          stack.push_back(i + stride[a]);
        }
      }
    }
  }
  std::vector<std::int64_t> active(n, -1);
  std::vector<std::size_t> cells;
  for (std::size_t i = 0; i < n; ++i)
    if (comp[i] >= 0 && touches_in[comp[i]] && touches_out[comp[i]]) {
      active[i] = static_cast<std::int64_t>(cells.size());
      cells.push_back(i);
    }
  DiffusionResult res;
  if (cells.empty()) return res;
  res.percolates = true;

  // Stencil: up to 6 unit conductances to active neighbours plus conductance 2
  // to each reservoir face.
  const std::size_t m = cells.size();
  std::vector<std::array<std::int64_t, 6>> nbr(m);
  std::vector<double> diag(m), rhs(m), c(m), g_in(m, 0.0), g_out(m, 0.0);
  std::vector<std::size_t> red, black;
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t i = cells[k];
    double g = 0;
    std::size_t q = 0, parity = 0;
    for (std::size_t a = 0; a < 3; ++a) {
      const std::size_t ca = coord(i, a);
      parity += ca;
      const std::int64_t lo = ca > 0 ? active[i - stride[a]] : -1;
      const std::int64_t hi = ca + 1 < ext[a] ? active[i + stride[a]] : -1;
      nbr[k][q++] = lo;
      nbr[k][q++] = hi;
      g += (lo >= 0) + (hi >= 0);
    }
    const std::size_t t = coord(i, ax);
    if (t == 0) g_in[k] = 2.0;
    if (t + 1 == L) g_out[k] = 2.0;
    diag[k] = g + g_in[k] + g_out[k];
    rhs[k] = g_in[k];
    c[k] = 1.0 - (static_cast<double>(t) + 0.5) / static_cast<double>(L);
    (parity % 2 ? black : red).push_back(k);
  }

  auto sweep = [&](const std::vector<std::size_t>& colour) {
    parallel_for(colour.size(), [&](std::size_t j) {
      const std::size_t k = colour[j];
      double acc = rhs[k];
      for (auto nb : nbr[k])
        if (nb >= 0) acc += c[static_cast<std::size_t>(nb)];
      c[k] += opt.omega * (acc / diag[k] - c[k]);
    });
  };
  auto fluxes = [&] {
    double fin = 0, fout = 0;
    for (std::size_t k = 0; k < m; ++k) {
      fin += g_in[k] * (1.0 - c[k]);
      fout += g_out[k] * c[k];
    }
    return std::pair{fin, fout};
  };

  double previous = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t it = 1; it <= opt.max_iterations; ++it) {
    sweep(red);
    sweep(black);
    const auto [fin, fout] = fluxes();
    const double mean = 0.5 * (fin + fout);
    const double mismatch = std::abs(fin - fout) / std::max(std::abs(mean), 1e-300);
    const double change = std::abs(mean - previous) / std::max(std::abs(mean), 1e-300);
    previous = mean;
    if (!std::isfinite(mean)) throw NumericError("diffusion solve diverged");
    if (mismatch < opt.flux_tolerance && change < opt.change_tolerance) {
      res.iterations = it;
      res.flux_in = fin;
      res.flux_out = fout;
      res.d_rel = std::clamp(mean * static_cast<double>(L) / static_cast<double>(area), 0.0, 1.0);
      return res;
    }
    if (it == opt.max_iterations)
      throw ConvergenceError("diffusion solve did not converge in " + std::to_string(it) +
                                 " iterations (flux mismatch " + std::to_string(mismatch) + ")",
                             mismatch);
  }
  throw ConvergenceError("diffusion solve was given no iterations", std::numeric_limits<double>::infinity());
}

// ---------------------------------------------------------------------------
// Reports and distribution summaries

struct MetricsReport {
  std::vector<double> volume_fraction;
  std::vector<std::vector<S2Point>> s2;  // per phase
  std::optional<double> tpb_density;     // only for >= 3 phases
  std::size_t transport_phase = 0;
  Axis direction = Axis::z;
  double d_rel = 0;
};

struct ReportOptions {
  /// Transport phase; unset means the majority phase.
  std::optional<std::size_t> phase;
  Axis direction = Axis::z;
  std::size_t s2_r_max = 16;
  bool tpb_corners = false;
  DiffusionOptions diffusion{};
};

inline MetricsReport report(const PhaseVolume& v, const ReportOptions& opt = {}) {
  MetricsReport r;
  r.volume_fraction = volume_fraction(v);
  const std::size_t min_ext = std::min({v.depth, v.height, v.width});
  const std::size_t r_max = std::min(opt.s2_r_max, min_ext - 1);
  for (std::size_t p = 0; p < v.n_phases; ++p) r.s2.push_back(two_point_correlation(v, p, r_max));
  if (v.n_phases >= 3) r.tpb_density = tpb_density(v, opt.tpb_corners);
  r.transport_phase = opt.phase.value_or(majority_phase(r.volume_fraction));
  r.direction = opt.direction;
  r.d_rel = relative_diffusivity(v, r.transport_phase, opt.direction, opt.diffusion).d_rel;
  return r;
}

/// Box-plot statistics: quartiles by linear interpolation between order
/// statistics, whiskers at the most extreme data inside the 1.5 IQR fences.
struct BoxStats {
  std::size_t n = 0;
  double min = 0, whisker_low = 0, q1 = 0, median = 0, mean = 0, q3 = 0, whisker_high = 0, max = 0;
  std::vector<double> outliers;
  friend bool operator==(const BoxStats&, const BoxStats&) = default;
};

/// Quantile of sorted data, linear interpolation at position q (n - 1).
inline double quantile_sorted(const std::vector<double>& s, double q) {
  if (s.empty()) throw UsageError("quantile of an empty sample");
  const double h = q * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  return s[lo] + (h - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

inline BoxStats box_stats(std::vector<double> x) {
  if (x.empty()) throw UsageError("box statistics need at least one value");
  for (double v : x)
    if (!std::isfinite(v)) throw NumericError("non-finite value in box statistics");
  std::sort(x.begin(), x.end());
  BoxStats b;
  b.n = x.size();
  b.min = x.front();
  b.max = x.back();
  b.q1 = quantile_sorted(x, 0.25);
  b.median = quantile_sorted(x, 0.5);
  b.q3 = quantile_sorted(x, 0.75);
  double sum = 0;
  for (double v : x) sum += v;
  b.mean = sum / static_cast<double>(x.size());
  const double iqr = b.q3 - b.q1, lo = b.q1 - 1.5 * iqr, hi = b.q3 + 1.5 * iqr;
  b.whisker_low = b.max;
  b.whisker_high = b.min;
  for (double v : x) {
    if (v >= lo) b.whisker_low = std::min(b.whisker_low, v);
    if (v <= hi) b.whisker_high = std::max(b.whisker_high, v);
    if (v < lo || v > hi) b.outliers.push_back(v);
  }
  return b;
}

struct MetricSummary {
  std::string metric;
  BoxStats real;
  BoxStats fake;
};

/// Summaries of the scalar metrics of two sets of volumes: every phase's
/// volume fraction, TPB density (3+ phases) and relative diffusivity of the
/// transport phase (majority phase of the first real volume unless given).
inline std::vector<MetricSummary> compare_datasets(const std::vector<PhaseVolume>& real,
                                                   const std::vector<PhaseVolume>& fake, ReportOptions opt = {}) {
  if (real.empty() || fake.empty()) throw UsageError("compare_datasets needs at least one real and one fake volume");
  const std::size_t n = real.front().n_phases;
  for (const auto* set : {&real, &fake})
    for (const auto& v : *set)
      if (v.n_phases != n) throw DataError("volumes disagree on n_phases");
  if (!opt.phase) opt.phase = majority_phase(volume_fraction(real.front()));
  opt.s2_r_max = 0;
  auto collect = [&](const std::vector<PhaseVolume>& set) {
    std::vector<std::vector<double>> cols(n + 2);
    for (const auto& v : set) {
      const auto r = report(v, opt);
      for (std::size_t p = 0; p < n; ++p) cols[p].push_back(r.volume_fraction[p]);
      if (r.tpb_density) cols[n].push_back(*r.tpb_density);
      cols[n + 1].push_back(r.d_rel);
    }
    return cols;
  };
  const auto rc = collect(real), fc = collect(fake);
  std::vector<MetricSummary> out;
  for (std::size_t p = 0; p < n; ++p)
    out.push_back({"volume_fraction_" + std::to_string(p), box_stats(rc[p]), box_stats(fc[p])});
  if (n >= 3) out.push_back({"tpb_density", box_stats(rc[n]), box_stats(fc[n])});
  out.push_back({"relative_diffusivity_" + std::to_string(*opt.phase), box_stats(rc[n + 1]), box_stats(fc[n + 1])});
  return out;
}

}  // namespace volsynth::metrics
