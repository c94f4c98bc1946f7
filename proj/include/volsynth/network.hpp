#pragma once

// Generator and discriminator architectures. The generator is a chain of 3-D
// transpose convolutions ending in a channel softmax; the discriminator is a
// chain of 2-D strided convolutions ending in one scalar per slice.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "volsynth/conv_spec.hpp"
#include "volsynth/info_density.hpp"
#include "volsynth/ops.hpp"

namespace volsynth {

struct NetworkConfig {
  std::size_t n_phases = 3;
  std::size_t latent_channels = 64;
  /// Spatial extent of the latent input used during training.
  std::size_t latent_spatial = 4;
  std::vector<ConvSpec> generator;
  std::vector<ConvSpec> discriminator;
  /// Hidden-layer slope of the discriminator's leaky ReLU (generator hidden layers use ReLU).
  double leaky_slope = 0.2;
  /// Accept generator layers that only fail the cropping rule (p >= k - s).
  bool allow_rule3_violation = false;
  /// Batch normalisation after each hidden generator layer (batch statistics only).
  bool generator_batch_norm = false;

  /// The 64^3, 3-phase architecture: G input 64x4x4x4, {4,2,2}x4 then {4,2,3};
  /// D {4,2,1}x4 then {4,2,0} on 3x64x64 slices.
  static NetworkConfig table1() {
    NetworkConfig c;
    c.n_phases = 3;
    c.latent_channels = 64;
    c.latent_spatial = 4;
    const std::size_t gch[] = {64, 512, 256, 128, 64, 3};
    for (int i = 0; i < 5; ++i) c.generator.push_back({4, 2, i == 4 ? 3u : 2u, gch[i], gch[i + 1]});
    const std::size_t dch[] = {3, 64, 128, 256, 512, 1};
    for (int i = 0; i < 5; ++i) c.discriminator.push_back({4, 2, i == 4 ? 0u : 1u, dch[i], dch[i + 1]});
    return c;
  }

  /// CPU-scale preset producing 32^3 volumes: {4,2,2}x3 then {4,2,3}, with a
  /// 32x32 discriminator {4,2,1}x3 then {4,2,0}. Generator batch
  /// normalisation is on; without it the small generator is slow to saturate
  /// its softmax.
  static NetworkConfig desk(std::size_t n_phases = 2) {
    NetworkConfig c;
    c.n_phases = n_phases;
    c.generator_batch_norm = true;
    c.latent_channels = 8;
    c.latent_spatial = 4;
    const std::size_t gch[] = {8, 32, 16, 8, n_phases};
    for (int i = 0; i < 4; ++i) c.generator.push_back({4, 2, i == 3 ? 3u : 2u, gch[i], gch[i + 1]});
    const std::size_t dch[] = {n_phases, 8, 16, 32, 1};
    for (int i = 0; i < 4; ++i) c.discriminator.push_back({4, 2, i == 3 ? 0u : 1u, dch[i], dch[i + 1]});
    return c;
  }

  /// Spatial extent after each generator layer, starting with the latent extent.
  std::vector<long long> generator_extents(std::size_t z_spatial) const {
    std::vector<long long> e{static_cast<long long>(z_spatial)};
    for (const auto& l : generator) e.push_back(transpose_extent(e.back(), l));
    return e;
  }

  /// Spatial extent after each discriminator layer, starting with the slice edge.
  std::vector<long long> discriminator_extents(std::size_t edge) const {
    std::vector<long long> e{static_cast<long long>(edge)};
    for (const auto& l : discriminator) e.push_back(forward_extent(e.back(), l));
    return e;
  }

  /// Edge length of the generated cube for a latent extent.
  std::size_t volume_edge(std::size_t z_spatial) const {
    const auto e = generator_extents(z_spatial);
    for (auto v : e)
      if (v <= 0) throw DimensionError("generator collapses a latent extent of " + std::to_string(z_spatial));
    return static_cast<std::size_t>(e.back());
  }

  std::size_t training_edge() const { return volume_edge(latent_spatial); }

  /// Throws ConfigError naming the offending field.
  void validate() const {
    if (n_phases < 2) throw ConfigError("network.n_phases: must be >= 2");
    if (latent_channels < 1) throw ConfigError("network.latent_channels: must be >= 1");
    if (latent_spatial < 1) throw ConfigError("network.latent_spatial: must be >= 1");
    if (generator.empty()) throw ConfigError("network.generator: at least one layer required");
    if (discriminator.empty()) throw ConfigError("network.discriminator: at least one layer required");
    std::size_t ch = latent_channels;
    for (std::size_t i = 0; i < generator.size(); ++i) {
      const auto& l = generator[i];
      const std::string field = "network.generator[" + std::to_string(i) + "]";
      if (l.k < 1 || l.s < 1 || l.c_in < 1 || l.c_out < 1) throw ConfigError(field + ": k, s and channels must be >= 1");
      if (l.c_in != ch) throw ConfigError(field + ".c_in: expected " + std::to_string(ch));
      ch = l.c_out;
      const auto r = density::check_rules(l);
      if (!r.rule1_ok) throw ConfigError(field + ": stride must be smaller than kernel (no kernel overlap)");
      if (!r.rule2_ok) throw ConfigError(field + ": kernel must be divisible by stride (checkerboard density)");
      if (!r.rule3_ok && !allow_rule3_violation)
        throw ConfigError(field + ": padding must be >= k - s (edge density gradient); set allow_rule3_violation");
    }
    if (ch != n_phases) throw ConfigError("network.generator: last layer must output n_phases channels");
    const auto ge = generator_extents(latent_spatial);
    for (std::size_t i = 1; i < ge.size(); ++i)
      if (ge[i] <= 0) throw ConfigError("network.generator[" + std::to_string(i - 1) + "]: output extent collapses");
    ch = n_phases;
    for (std::size_t i = 0; i < discriminator.size(); ++i) {
      const auto& l = discriminator[i];
      const std::string field = "network.discriminator[" + std::to_string(i) + "]";
      if (l.k < 1 || l.s < 1 || l.c_in < 1 || l.c_out < 1) throw ConfigError(field + ": k, s and channels must be >= 1");
      if (l.c_in != ch) throw ConfigError(field + ".c_in: expected " + std::to_string(ch));
      ch = l.c_out;
    }
    if (ch != 1) throw ConfigError("network.discriminator: last layer must output 1 channel");
    const auto de = discriminator_extents(static_cast<std::size_t>(ge.back()));
    for (std::size_t i = 1; i < de.size(); ++i)
      if (de[i] <= 0) throw ConfigError("network.discriminator[" + std::to_string(i - 1) + "]: input too small");
    if (de.back() != 1) throw ConfigError("network.discriminator: must reduce a slice to 1x1");
  }
};

/// Per-channel normalisation of [N, C, ...] with batch statistics, then scale and shift.
template <class T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          T eps = T(1e-5)) {
  const T inv_m = T(1) / static_cast<T>(x.numel() / x.dim(1));
  const auto mu = scale(sum_to_bias(x), inv_m);
  const auto centred = sub(x, broadcast_bias(mu, x.shape()));
  const auto var = scale(sum_to_bias(square(centred)), inv_m);
  const auto inv_std = div(BasicTensor<T>::ones(var.shape()), sqrt(add_scalar(var, eps)));
  return add_bias(mul(centred, broadcast_bias(mul(inv_std, gamma), x.shape())), beta);
}

namespace detail {
/// Kaiming-uniform weights, Uniform(-b, b) with b = gain * sqrt(3 / fan_in),
/// and zero biases. `gain` matches the activation that follows the layer.
template <class T, class Rng>
void init_layer(std::vector<BasicTensor<T>>& params, Shape wshape, std::size_t fan_in, double gain, std::size_t bias,
                Rng& rng) {
  const T bound = static_cast<T>(gain * std::sqrt(3.0 / static_cast<double>(fan_in)));
  auto w = BasicTensor<T>::uniform(std::move(wshape), rng, -bound, bound);
  w.set_requires_grad(true);
  params.push_back(w);
  params.push_back(BasicTensor<T>(Shape{bias}, std::vector<T>(bias, T(0)), true));
}
}  // namespace detail

/// 3-D generator: latent [N, C_z, z, z, z] -> phase probabilities [N, n_phases, l, l, l].
template <class T>
class Generator {
public:
  Generator() = default;
  template <class Rng>
  Generator(const NetworkConfig& cfg, Rng& rng) : cfg_(cfg) {
    for (std::size_t i = 0; i < cfg.generator.size(); ++i) {
      const auto& l = cfg.generator[i];
      // Each output voxel of a transpose convolution sees about c_in (k/s)^3 inputs.
      detail::init_layer(params_, Shape{l.c_in, l.c_out, l.k, l.k, l.k}, l.c_in * l.k * l.k * l.k / (l.s * l.s * l.s),
                         i + 1 < cfg.generator.size() ? std::sqrt(2.0) : 1.0, l.c_out, rng);
      if (cfg.generator_batch_norm && i + 1 < cfg.generator.size()) {
        params_.push_back(BasicTensor<T>(Shape{l.c_out}, std::vector<T>(l.c_out, T(1)), true));
        params_.push_back(BasicTensor<T>(Shape{l.c_out}, std::vector<T>(l.c_out, T(0)), true));
      }
    }
  }
  Generator(const NetworkConfig& cfg, std::vector<BasicTensor<T>> params) : cfg_(cfg), params_(std::move(params)) {}

  BasicTensor<T> forward(const BasicTensor<T>& z) const {
    if (z.rank() != 5 || z.dim(1) != cfg_.latent_channels)
      throw DimensionError("generator expects latent [N, " + std::to_string(cfg_.latent_channels) + ", z, z, z]");
    BasicTensor<T> h = z;
    std::size_t q = 0;
    for (std::size_t i = 0; i < cfg_.generator.size(); ++i) {
      const auto& l = cfg_.generator[i];
      h = add_bias(conv_transpose(h, params_[q], l.s, l.p), params_[q + 1]);
      q += 2;
      if (i + 1 == cfg_.generator.size()) return softmax_channels(h);
      if (cfg_.generator_batch_norm) {
        h = batch_norm(h, params_[q], params_[q + 1]);
        q += 2;
      }
      h = relu(h);
    }
    return h;
  }

  const NetworkConfig& config() const { return cfg_; }
  std::vector<BasicTensor<T>>& params() { return params_; }
  const std::vector<BasicTensor<T>>& params() const { return params_; }

private:
  NetworkConfig cfg_;
  std::vector<BasicTensor<T>> params_;
};

/// 2-D discriminator: slices [B, n_phases, l, l] -> scores [B].
template <class T>
class Discriminator {
public:
  Discriminator() = default;
  template <class Rng>
  Discriminator(const NetworkConfig& cfg, Rng& rng) : cfg_(cfg) {
    const double leaky_gain = std::sqrt(2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope));
    for (std::size_t i = 0; i < cfg.discriminator.size(); ++i) {
      const auto& l = cfg.discriminator[i];
      detail::init_layer(params_, Shape{l.c_out, l.c_in, l.k, l.k}, l.c_in * l.k * l.k,
                         i + 1 < cfg.discriminator.size() ? leaky_gain : 1.0, l.c_out, rng);
    }
  }
  Discriminator(const NetworkConfig& cfg, std::vector<BasicTensor<T>> params) : cfg_(cfg), params_(std::move(params)) {}

  BasicTensor<T> forward(const BasicTensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.n_phases)
      throw DimensionError("discriminator expects slices [B, " + std::to_string(cfg_.n_phases) + ", l, l]");
    evaluations_ += x.dim(0);
    BasicTensor<T> h = x;
    for (std::size_t i = 0; i < cfg_.discriminator.size(); ++i) {
      const auto& l = cfg_.discriminator[i];
      h = add_bias(conv(h, params_[2 * i], l.s, l.p), params_[2 * i + 1]);
      if (i + 1 < cfg_.discriminator.size()) h = leaky_relu(h, static_cast<T>(cfg_.leaky_slope));
    }
    return reshape(h, Shape{x.dim(0)});
  }

  /// Number of slices scored since construction or the last reset.
  std::size_t evaluations() const { return evaluations_; }
  void reset_evaluations() { evaluations_ = 0; }

  const NetworkConfig& config() const { return cfg_; }
  std::vector<BasicTensor<T>>& params() { return params_; }
  const std::vector<BasicTensor<T>>& params() const { return params_; }

private:
  NetworkConfig cfg_;
  std::vector<BasicTensor<T>> params_;
  mutable std::size_t evaluations_ = 0;
};

}  // namespace volsynth
