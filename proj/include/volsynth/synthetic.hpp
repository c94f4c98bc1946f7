#pragma once

// Synthetic two-phase micrographs for smoke runs and tests: discs of phase 1
// dropped at random on a phase-0 background until a target area fraction is
// reached. The image is periodic so patches see no border effects.

#include <cstdint>
#include <random>

#include "volsynth/data.hpp"
#include "volsynth/error.hpp"

namespace volsynth {

inline Micrograph blob_micrograph(std::size_t size, double fraction, double radius, std::uint64_t seed) {
  if (size < 1) throw UsageError("blob image size must be >= 1");
  if (!(fraction > 0 && fraction < 1)) throw UsageError("blob fraction must lie in (0, 1)");
  if (!(radius > 0)) throw UsageError("blob radius must be > 0");
  Micrograph m{size, size, 2, std::vector<std::uint8_t>(size * size, 0)};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(0.0, static_cast<double>(size));
  const auto target = static_cast<std::size_t>(fraction * static_cast<double>(size * size));
  const long r = static_cast<long>(radius) + 1, n = static_cast<long>(size);
  std::size_t filled = 0;
  while (filled < target) {
    const double cy = pos(rng), cx = pos(rng);
    for (long dy = -r; dy <= r; ++dy)
      for (long dx = -r; dx <= r; ++dx) {
        const long y = static_cast<long>(cy) + dy, x = static_cast<long>(cx) + dx;
        const double ey = static_cast<double>(y) + 0.5 - cy, ex = static_cast<double>(x) + 0.5 - cx;
        if (ey * ey + ex * ex > radius * radius) continue;
        auto& px = m.labels[static_cast<std::size_t>(((y % n + n) % n) * n + (x % n + n) % n)];
        if (px == 0 && filled < target) {
          px = 1;
          ++filled;
        }
      }
  }
  return m;
}

}  // namespace volsynth
