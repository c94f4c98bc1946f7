#pragma once

// File formats: binary PGM (P5) micrographs, volume files (one JSON header
// line followed by a little-endian payload) and density-map exports.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "volsynth/data.hpp"
#include "volsynth/error.hpp"
#include "volsynth/info_density.hpp"

namespace volsynth::io {

static_assert(std::endian::native == std::endian::little, "payload IO assumes a little-endian host");

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

// ---------------------------------------------------------------------------
// PGM

namespace detail {
inline std::size_t pgm_field(const std::string& s, std::size_t& pos) {
  for (;;) {
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    if (pos < s.size() && s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  std::size_t start = pos;
  while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) ++pos;
  if (start == pos) throw DataError("malformed PGM header");
  return std::stoul(s.substr(start, pos - start));
}
}  // namespace detail

/// Raw 8-bit P5 image: width, height and gray levels.
struct Gray8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

inline Gray8 parse_pgm(const std::string& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw DataError("not a binary PGM (P5) file");
  std::size_t pos = 2;
  Gray8 g;
  g.width = detail::pgm_field(bytes, pos);
  g.height = detail::pgm_field(bytes, pos);
  const std::size_t maxval = detail::pgm_field(bytes, pos);
  if (maxval == 0 || maxval > 255) throw DataError("only 8-bit PGM files are supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) throw DataError("malformed PGM header");
  ++pos;
  if (g.width == 0 || g.height == 0) throw DataError("PGM has zero extent");
  if (bytes.size() - pos < g.width * g.height) throw DataError("PGM payload truncated");
  g.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + g.width * g.height));
  return g;
}

inline std::string format_pgm(std::size_t width, std::size_t height, const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != width * height) throw DimensionError("PGM pixel count does not match its extents");
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  return out;
}

/// Gray level = phase index. With n_phases == 0 the phase count is inferred as
/// max label + 1 (at least 2).
inline Micrograph read_micrograph(const std::filesystem::path& path, std::size_t n_phases = 0) {
  const auto g = parse_pgm(read_file(path));
  Micrograph m;
  m.width = g.width;
  m.height = g.height;
  m.labels = g.pixels;
  const std::size_t top = *std::max_element(m.labels.begin(), m.labels.end());
  m.n_phases = n_phases ? n_phases : std::max<std::size_t>(2, top + 1);
  try {
    m.validate();
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return m;
}

inline void write_micrograph(const std::filesystem::path& path, const Micrograph& m) {
  m.validate();
  write_file(path, format_pgm(m.width, m.height, m.labels));
}

// ---------------------------------------------------------------------------
// Volumes

inline constexpr const char* kVolumeFormat = "volsynth-volume";
inline constexpr int kVolumeVersion = 1;

/// Labels are written as u8 [z][y][x]; probabilities as f32 [phase][z][y][x].
inline std::string format_volume(const PhaseVolume& v) {
  v.validate();
  nlohmann::ordered_json h;
  h["format"] = kVolumeFormat;
  h["version"] = kVolumeVersion;
  h["extents"] = {v.depth, v.height, v.width};
  h["n_phases"] = v.n_phases;
  h["encoding"] = v.has_labels() ? "labels" : "probs";
  h["dtype"] = v.has_labels() ? "u8" : "f32";
  h["byte_order"] = "little";
  std::string out = h.dump() + "\n";
  if (v.has_labels()) {
    out.append(reinterpret_cast<const char*>(v.labels.data()), v.labels.size());
  } else {
    std::vector<float> f(v.probs.begin(), v.probs.end());
    out.append(reinterpret_cast<const char*>(f.data()), f.size() * sizeof(float));
  }
  return out;
}

inline PhaseVolume parse_volume(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw DataError("volume file has no header line");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("volume header is not valid JSON: ") + e.what());
  }
  try {
    if (h.at("format").get<std::string>() != kVolumeFormat) throw DataError("not a volume file");
    if (h.at("version").get<int>() != kVolumeVersion) throw DataError("unsupported volume file version");
    if (h.value("byte_order", "little") != "little") throw DataError("volume payload must be little-endian");
    const auto ext = h.at("extents").get<std::vector<std::size_t>>();
    if (ext.size() != 3) throw DataError("volume extents must have 3 entries");
    PhaseVolume v{ext[0], ext[1], ext[2], h.at("n_phases").get<std::size_t>(), {}, {}};
    const auto encoding = h.at("encoding").get<std::string>();
    const auto dtype = h.at("dtype").get<std::string>();
    const char* payload = bytes.data() + nl + 1;
    const std::size_t avail = bytes.size() - nl - 1;
    if (encoding == "labels" && dtype == "u8") {
      if (avail != v.voxels()) throw DataError("volume payload size does not match its header");
      v.labels.assign(payload, payload + avail);
    } else if (encoding == "probs" && dtype == "f32") {
      const std::size_t n = v.voxels() * v.n_phases;
      if (avail != n * sizeof(float)) throw DataError("volume payload size does not match its header");
      std::vector<float> f(n);
      std::memcpy(f.data(), payload, avail);
      v.probs.assign(f.begin(), f.end());
    } else {
      throw DataError("unsupported volume encoding " + encoding + "/" + dtype);
    }
    v.validate();
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("volume header: ") + e.what());
  }
}

inline PhaseVolume read_volume(const std::filesystem::path& path) {
  try {
    return parse_volume(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline void write_volume(const std::filesystem::path& path, const PhaseVolume& v) { write_file(path, format_volume(v)); }

// ---------------------------------------------------------------------------
// Density maps

namespace detail {
// 1-D maps become one row, 2-D maps a grid, 3-D maps their middle plane.
inline std::pair<std::vector<std::size_t>, std::vector<std::int64_t>> density_plane(const density::InfoDensityMap& m) {
  if (m.extents.size() == 1) return {{1, m.extents[0]}, m.counts};
  if (m.extents.size() == 2) return {m.extents, m.counts};
  if (m.extents.size() == 3) {
    const std::size_t plane = m.extents[1] * m.extents[2], mid = m.extents[0] / 2;
    return {{m.extents[1], m.extents[2]},
            {m.counts.begin() + static_cast<long>(mid * plane), m.counts.begin() + static_cast<long>((mid + 1) * plane)}};
  }
  throw DimensionError("density maps of rank " + std::to_string(m.extents.size()) + " cannot be exported");
}
}  // namespace detail

inline std::string density_csv(const density::InfoDensityMap& m) {
  const auto [ext, counts] = detail::density_plane(m);
  std::string out;
  for (std::size_t i = 0; i < ext[0]; ++i) {
    for (std::size_t j = 0; j < ext[1]; ++j) {
      if (j) out += ',';
      out += std::to_string(counts[i * ext[1] + j]);
    }
    out += '\n';
  }
  return out;
}

/// Counts rescaled linearly so the minimum maps to 0 and the maximum to 255
/// (a uniform map is written as all 255).
inline std::string density_pgm(const density::InfoDensityMap& m) {
  const auto [ext, counts] = detail::density_plane(m);
  const auto [lo_it, hi_it] = std::minmax_element(counts.begin(), counts.end());
  const double lo = static_cast<double>(*lo_it), hi = static_cast<double>(*hi_it);
  std::vector<std::uint8_t> px(counts.size(), 255);
  if (hi > lo)
    for (std::size_t i = 0; i < counts.size(); ++i)
      px[i] = static_cast<std::uint8_t>(std::lround(255.0 * (static_cast<double>(counts[i]) - lo) / (hi - lo)));
  return format_pgm(ext[1], ext[0], px);
}

}  // namespace volsynth::io
