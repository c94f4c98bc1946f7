#pragma once

// Checkpoint files:
//   8-byte magic "VSYNCKPT", u32 format version, u64 header length,
//   JSON header, raw little-endian payload, u64 FNV-1a checksum of all
//   preceding bytes.
// The payload holds every parameter tensor (generator first, then each
// discriminator) followed by the Adam first and second moments in the same
// order. Files carry no timestamps, so equal states give equal bytes.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "volsynth/config.hpp"
#include "volsynth/error.hpp"
#include "volsynth/io.hpp"
#include "volsynth/trainer.hpp"

namespace volsynth {

inline constexpr char kCheckpointMagic[8] = {'V', 'S', 'Y', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(const char* data, std::size_t n) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ull;
  }
  return h;
}

template <class T>
constexpr const char* precision_name() {
  return std::is_same_v<T, float> ? "f32" : "f64";
}

namespace ckpt_detail {

template <class V>
void put(std::string& out, const V& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class V>
V get(const std::string& in, std::size_t& pos) {
  if (in.size() - pos < sizeof(V)) throw IntegrityError("checkpoint truncated");
  V v;
  std::memcpy(&v, in.data() + pos, sizeof v);
  pos += sizeof v;
  return v;
}

template <class T>
void put_values(std::string& out, const std::vector<T>& v) {
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T));
}

template <class T>
void get_values(const std::string& in, std::size_t& pos, std::vector<T>& v, std::size_t n) {
  if (in.size() - pos < n * sizeof(T)) throw IntegrityError("checkpoint payload truncated");
  v.resize(n);
  std::memcpy(v.data(), in.data() + pos, n * sizeof(T));
  pos += n * sizeof(T);
}

template <class T>
struct Entry {
  std::string name;
  std::vector<BasicTensor<T>>* params;
  AdamState<T>* opt;
};

template <class T>
std::vector<Entry<T>> entries(GanState<T>& st) {
  std::vector<Entry<T>> e{{"generator", &st.generator.params(), &st.g_opt}};
  for (std::size_t i = 0; i < st.discriminators.size(); ++i)
    e.push_back({"discriminator" + std::to_string(i), &st.discriminators[i].params(), &st.d_opt[i]});
  return e;
}

}  // namespace ckpt_detail

/// Serialises the state. `meta` is stored verbatim in the header (for example
/// the effective run configuration).
template <class T>
std::string format_checkpoint(const GanState<T>& state, const nlohmann::ordered_json& meta = nullptr) {
  auto& st = const_cast<GanState<T>&>(state);
  nlohmann::ordered_json h;
  h["precision"] = precision_name<T>();
  h["step"] = st.step;
  std::ostringstream rng;
  rng << st.rng;
  h["rng"] = rng.str();
  h["network"] = to_json(st.net);
  h["discriminators"] = st.discriminators.size();
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  for (const auto& e : ckpt_detail::entries(st)) {
    for (std::size_t i = 0; i < e.params->size(); ++i)
      tensors.push_back({{"name", e.name + "." + std::to_string(i)}, {"shape", (*e.params)[i].shape()}});
  }
  h["tensors"] = tensors;
  nlohmann::ordered_json opt = nlohmann::ordered_json::object();
  for (const auto& e : ckpt_detail::entries(st)) opt[e.name] = e.opt->step;
  h["adam_steps"] = opt;
  h["meta"] = meta;
  const std::string header = h.dump();

  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  ckpt_detail::put(out, kCheckpointVersion);
  ckpt_detail::put(out, static_cast<std::uint64_t>(header.size()));
  out += header;
  for (const auto& e : ckpt_detail::entries(st))
    for (const auto& p : *e.params) ckpt_detail::put_values(out, p.data());
  for (const auto& e : ckpt_detail::entries(st)) {
    for (const auto& m : e.opt->m) ckpt_detail::put_values(out, m);
    for (const auto& v : e.opt->v) ckpt_detail::put_values(out, v);
  }
  ckpt_detail::put(out, fnv1a64(out.data(), out.size()));
  return out;
}

/// Header of a checkpoint after integrity checks.
inline nlohmann::json checkpoint_header(const std::string& bytes, std::size_t* payload_pos = nullptr) {
  if (bytes.size() < sizeof kCheckpointMagic + 4 + 8 + 8) throw IntegrityError("checkpoint truncated");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw IntegrityError("not a checkpoint file (bad magic)");
  std::size_t pos = sizeof kCheckpointMagic;
  const auto version = ckpt_detail::get<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion)
    throw IntegrityError("checkpoint format version " + std::to_string(version) + " is not supported");
  const auto body = bytes.size() - sizeof(std::uint64_t);
  std::size_t tail = body;
  if (ckpt_detail::get<std::uint64_t>(bytes, tail) != fnv1a64(bytes.data(), body))
    throw IntegrityError("checkpoint checksum mismatch (corrupted or truncated file)");
  const auto hlen = ckpt_detail::get<std::uint64_t>(bytes, pos);
  if (hlen > body - pos) throw IntegrityError("checkpoint header length out of range");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(pos, hlen));
  } catch (const nlohmann::json::exception&) {
    throw IntegrityError("checkpoint header is not valid JSON");
  }
  if (payload_pos) *payload_pos = pos + hlen;
  return h;
}

template <class T>
GanState<T> parse_checkpoint(const std::string& bytes) {
  std::size_t pos = 0;
  const auto h = checkpoint_header(bytes, &pos);
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  GanState<T> st;
  try {
    if (h.at("precision").get<std::string>() != precision_name<T>())
      throw UsageError("checkpoint precision is " + h.at("precision").get<std::string>() + ", requested " +
                       precision_name<T>());
    st.net = network_from_json(h.at("network"));
    st.net.validate();
    st.step = h.at("step").get<std::uint64_t>();
    std::istringstream rng(h.at("rng").get<std::string>());
    rng >> st.rng;
    if (!rng) throw IntegrityError("checkpoint RNG state is unreadable");
    // Rebuild the networks so parameter shapes follow the stored network.
    std::mt19937_64 scratch(0);
    st.generator = Generator<T>(st.net, scratch);
    const auto nd = h.at("discriminators").get<std::size_t>();
    if (nd < 1 || nd > 3) throw IntegrityError("checkpoint discriminator count out of range");
    for (std::size_t i = 0; i < nd; ++i) st.discriminators.emplace_back(st.net, scratch);
    st.g_opt = AdamState<T>::for_params(st.generator.params());
    for (const auto& d : st.discriminators) st.d_opt.push_back(AdamState<T>::for_params(d.params()));

    const auto& tensors = h.at("tensors");
    std::size_t ti = 0;
    for (const auto& e : ckpt_detail::entries(st))
      for (std::size_t i = 0; i < e.params->size(); ++i, ++ti) {
        if (ti >= tensors.size() || tensors[ti].at("shape").get<Shape>() != (*e.params)[i].shape() ||
            tensors[ti].at("name").get<std::string>() != e.name + "." + std::to_string(i))
          throw IntegrityError("checkpoint tensor list does not match its network (" + e.name + "." +
                               std::to_string(i) + ")");
      }
    if (ti != tensors.size()) throw IntegrityError("checkpoint lists extra tensors");

    for (const auto& e : ckpt_detail::entries(st))
      for (auto& p : *e.params) {
        std::vector<T> v;
        ckpt_detail::get_values(bytes, pos, v, p.numel());
        p = BasicTensor<T>(p.shape(), std::move(v), true);
      }
    for (const auto& e : ckpt_detail::entries(st)) {
      for (auto& m : e.opt->m) ckpt_detail::get_values(bytes, pos, m, m.size());
      for (auto& v : e.opt->v) ckpt_detail::get_values(bytes, pos, v, v.size());
      e.opt->step = h.at("adam_steps").at(e.name).template get<std::uint64_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("checkpoint network: ") + e.what());
  }
  if (pos != body) throw IntegrityError("checkpoint payload size does not match its header");
  return st;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const GanState<T>& st, const nlohmann::ordered_json& meta = nullptr) {
  io::write_file(path, format_checkpoint(st, meta));
}

template <class T>
GanState<T> load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint<T>(io::read_file(path));
}

}  // namespace volsynth
