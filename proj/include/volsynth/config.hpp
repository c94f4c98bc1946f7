#pragma once

// JSON run configuration. Every field is optional on input and falls back to
// the documented default; the effective configuration is always written back
// in full so a run never depends on implicit defaults.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "volsynth/error.hpp"
#include "volsynth/network.hpp"
#include "volsynth/trainer.hpp"

namespace volsynth {

inline constexpr int kConfigSchemaVersion = 1;

/// Options for the metrics subcommand and for post-training reports.
struct MetricsOptions {
  /// Phase used for diffusivity and two-point correlation; -1 means the
  /// majority phase of the training image.
  int phase = -1;
  Axis direction = Axis::z;
  std::size_t s2_r_max = 16;
  double sor_omega = 1.9;
  std::size_t max_iterations = 200000;
  bool tpb_corners = false;
};

struct RunConfig {
  std::vector<std::filesystem::path> training_images;
  /// Image index per axis (z, y, x).
  std::array<std::size_t, 3> axis_image{0, 0, 0};
  bool anisotropic = false;
  std::filesystem::path output_dir = "run";
  std::string precision = "f64";
  std::size_t threads = 1;
  /// Latent spatial size for the volume written after training.
  std::size_t generate_z = 4;
  NetworkConfig network = NetworkConfig::desk();
  TrainConfig train = TrainConfig::desk();
  MetricsOptions metrics;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;

  void validate() const {
    if (precision != "f32" && precision != "f64") throw ConfigError("precision: must be f32 or f64");
    if (threads < 1) throw ConfigError("threads: must be >= 1");
    for (std::size_t a = 0; a < 3; ++a)
      if (!training_images.empty() && axis_image[a] >= training_images.size())
        throw ConfigError("axis_image[" + std::to_string(a) + "]: no such training image");
    if (!anisotropic && (axis_image[0] != axis_image[1] || axis_image[1] != axis_image[2]))
      throw ConfigError("axis_image: isotropic runs must use one image for all axes");
    if (!anisotropic && train.n_discriminators() != 1)
      throw ConfigError("train.axis_discriminator: isotropic runs use a single discriminator");
    network.validate();
    train.validate(network.training_edge());
    if (generate_z < network.latent_spatial)
      throw ConfigError("generate_z: must be >= network.latent_spatial");
    if (!(metrics.sor_omega > 0 && metrics.sor_omega < 2)) throw ConfigError("metrics.sor_omega: must be in (0, 2)");
  }
};

namespace config_detail {

using nlohmann::json;

template <class V>
V field(const json& j, const std::string& key, const std::string& path, const V& fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(path + key + ": wrong type (" + j.at(key).dump() + ")");
  }
}

inline void reject_unknown(const json& j, const std::vector<std::string>& known, const std::string& path) {
  if (!j.is_object()) throw ConfigError((path.empty() ? std::string("config") : path.substr(0, path.size() - 1)) +
                                        ": expected an object");
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError(path + k + ": unknown field");
}

inline json layers_json(const std::vector<ConvSpec>& ls) {
  json a = json::array();
  for (const auto& l : ls) a.push_back({{"k", l.k}, {"s", l.s}, {"p", l.p}, {"c_in", l.c_in}, {"c_out", l.c_out}});
  return a;
}

inline std::vector<ConvSpec> layers_from(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path + ": expected an array of layers");
  std::vector<ConvSpec> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string p = path + "[" + std::to_string(i) + "].";
    reject_unknown(j[i], {"k", "s", "p", "c_in", "c_out"}, p);
    ConvSpec c;
    for (const char* key : {"k", "s", "c_in", "c_out"})
      if (!j[i].contains(key)) throw ConfigError(p + key + ": required");
    c.k = field<std::size_t>(j[i], "k", p, 1);
    c.s = field<std::size_t>(j[i], "s", p, 1);
    c.p = field<std::size_t>(j[i], "p", p, 0);
    c.c_in = field<std::size_t>(j[i], "c_in", p, 1);
    c.c_out = field<std::size_t>(j[i], "c_out", p, 1);
    out.push_back(c);
  }
  return out;
}

}  // namespace config_detail

inline nlohmann::ordered_json to_json(const NetworkConfig& n) {
  nlohmann::ordered_json j;
  j["n_phases"] = n.n_phases;
  j["latent_channels"] = n.latent_channels;
  j["latent_spatial"] = n.latent_spatial;
  j["generator"] = config_detail::layers_json(n.generator);
  j["discriminator"] = config_detail::layers_json(n.discriminator);
  j["leaky_slope"] = n.leaky_slope;
  j["allow_rule3_violation"] = n.allow_rule3_violation;
  j["generator_batch_norm"] = n.generator_batch_norm;
  return j;
}

/// `preset` ("table1" or "desk") supplies the defaults for missing fields.
inline NetworkConfig network_from_json(const nlohmann::json& j, const std::string& path = "network.") {
  using namespace config_detail;
  reject_unknown(j, {"preset", "n_phases", "latent_channels", "latent_spatial", "generator", "discriminator",
                     "leaky_slope", "allow_rule3_violation", "generator_batch_norm"},
                 path);
  const auto preset = field<std::string>(j, "preset", path, "desk");
  const std::size_t phases = field<std::size_t>(j, "n_phases", path, preset == "table1" ? 3 : 2);
  NetworkConfig n;
  if (preset == "table1") {
    n = NetworkConfig::table1();
    if (phases != n.n_phases) {
      n.generator.back().c_out = phases;
      n.discriminator.front().c_in = phases;
      n.n_phases = phases;
    }
  } else if (preset == "desk") {
    n = NetworkConfig::desk(phases);
  } else {
    throw ConfigError(path + "preset: unknown preset '" + preset + "' (expected table1 or desk)");
  }
  n.latent_channels = field(j, "latent_channels", path, n.latent_channels);
  n.latent_spatial = field(j, "latent_spatial", path, n.latent_spatial);
  if (j.contains("generator")) n.generator = layers_from(j["generator"], path + "generator");
  if (j.contains("discriminator")) n.discriminator = layers_from(j["discriminator"], path + "discriminator");
  n.leaky_slope = field(j, "leaky_slope", path, n.leaky_slope);
  n.allow_rule3_violation = field(j, "allow_rule3_violation", path, n.allow_rule3_violation);
  n.generator_batch_norm = field(j, "generator_batch_norm", path, n.generator_batch_norm);
  return n;
}

inline nlohmann::ordered_json to_json(const TrainConfig& t) {
  nlohmann::ordered_json j;
  j["n_critic"] = t.n_critic;
  j["batch_d"] = t.batch_d;
  j["batch_g"] = t.batch_g;
  j["gp_lambda"] = t.gp_lambda;
  j["adam"] = {{"lr", t.adam.lr}, {"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"eps", t.adam.eps}};
  j["slices_per_axis"] = t.slices_per_axis;
  j["axis_discriminator"] = t.axis_discriminator;
  if (t.augment) j["augment"] = *t.augment;
  else j["augment"] = nullptr;
  j["steps"] = t.steps;
  return j;
}

inline TrainConfig train_from_json(const nlohmann::json& j, TrainConfig t, const std::string& path = "train.") {
  using namespace config_detail;
  reject_unknown(j, {"n_critic", "batch_d", "batch_g", "gp_lambda", "adam", "slices_per_axis", "axis_discriminator",
                     "augment", "steps"},
                 path);
  t.n_critic = field(j, "n_critic", path, t.n_critic);
  t.batch_d = field(j, "batch_d", path, t.batch_d);
  t.batch_g = field(j, "batch_g", path, t.batch_g);
  t.gp_lambda = field(j, "gp_lambda", path, t.gp_lambda);
  if (j.contains("adam")) {
    const auto& a = j["adam"];
    const std::string ap = path + "adam.";
    reject_unknown(a, {"lr", "beta1", "beta2", "eps"}, ap);
    t.adam.lr = field(a, "lr", ap, t.adam.lr);
    t.adam.beta1 = field(a, "beta1", ap, t.adam.beta1);
    t.adam.beta2 = field(a, "beta2", ap, t.adam.beta2);
    t.adam.eps = field(a, "eps", ap, t.adam.eps);
  }
  t.slices_per_axis = field(j, "slices_per_axis", path, t.slices_per_axis);
  t.axis_discriminator = field(j, "axis_discriminator", path, t.axis_discriminator);
  if (j.contains("augment") && !j["augment"].is_null()) t.augment = field<bool>(j, "augment", path, true);
  t.steps = field(j, "steps", path, t.steps);
  return t;
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["schema_version"] = kConfigSchemaVersion;
  std::vector<std::string> imgs;
  for (const auto& p : c.training_images) imgs.push_back(p.generic_string());
  j["training_images"] = imgs;
  j["axis_image"] = c.axis_image;
  j["anisotropic"] = c.anisotropic;
  j["output_dir"] = c.output_dir.generic_string();
  j["precision"] = c.precision;
  j["threads"] = c.threads;
  j["seed"] = c.seed;
  j["generate_z"] = c.generate_z;
  j["checkpoint_every"] = c.checkpoint_every;
  j["network"] = to_json(c.network);
  j["train"] = to_json(c.train);
  j["metrics"] = {{"phase", c.metrics.phase},
                  {"direction", to_string(c.metrics.direction)},
                  {"s2_r_max", c.metrics.s2_r_max},
                  {"sor_omega", c.metrics.sor_omega},
                  {"max_iterations", c.metrics.max_iterations},
                  {"tpb_corners", c.metrics.tpb_corners}};
  return j;
}

/// Parses and validates a run configuration. Relative training-image paths
/// resolve against `base_dir`.
inline RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  using namespace config_detail;
  reject_unknown(j, {"schema_version", "training_images", "axis_image", "anisotropic", "output_dir", "precision",
                     "threads", "seed", "generate_z", "checkpoint_every", "network", "train", "metrics"},
                 "");
  if (!j.contains("schema_version")) throw ConfigError("schema_version: required");
  const int version = field<int>(j, "schema_version", "", 0);
  if (version != kConfigSchemaVersion)
    throw ConfigError("schema_version: unsupported version " + std::to_string(version));
  RunConfig c;
  for (const auto& p : field<std::vector<std::string>>(j, "training_images", "", {})) {
    std::filesystem::path path(p);
    c.training_images.push_back(path.is_relative() && !base_dir.empty() ? base_dir / path : path);
  }
  c.axis_image = field(j, "axis_image", "", c.axis_image);
  c.anisotropic = field(j, "anisotropic", "", c.anisotropic);
  c.output_dir = field<std::string>(j, "output_dir", "", c.output_dir.string());
  c.precision = field(j, "precision", "", c.precision);
  c.threads = field(j, "threads", "", c.threads);
  c.seed = field(j, "seed", "", c.seed);
  c.generate_z = field(j, "generate_z", "", c.generate_z);
  c.checkpoint_every = field(j, "checkpoint_every", "", c.checkpoint_every);
  c.network = network_from_json(j.value("network", nlohmann::json::object()));
  const TrainConfig base = c.network.training_edge() >= 64 ? TrainConfig{} : TrainConfig::desk();
  c.train = train_from_json(j.value("train", nlohmann::json::object()), base);
  if (c.anisotropic && !j.value("train", nlohmann::json::object()).contains("axis_discriminator"))
    c.train.axis_discriminator = {0, 1, 2};
  if (j.contains("metrics")) {
    const auto& m = j["metrics"];
    const std::string mp = "metrics.";
    reject_unknown(m, {"phase", "direction", "s2_r_max", "sor_omega", "max_iterations", "tpb_corners"}, mp);
    c.metrics.phase = field(m, "phase", mp, c.metrics.phase);
    if (m.contains("direction")) {
      try {
        c.metrics.direction = parse_axis(field<std::string>(m, "direction", mp, "z"));
      } catch (const UsageError& e) {
        throw ConfigError(mp + "direction: " + e.what());
      }
    }
    c.metrics.s2_r_max = field(m, "s2_r_max", mp, c.metrics.s2_r_max);
    c.metrics.sor_omega = field(m, "sor_omega", mp, c.metrics.sor_omega);
    c.metrics.max_iterations = field(m, "max_iterations", mp, c.metrics.max_iterations);
    c.metrics.tpb_corners = field(m, "tpb_corners", mp, c.metrics.tpb_corners);
  }
  c.train.seed = c.seed;
  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return c;
}

}  // namespace volsynth
