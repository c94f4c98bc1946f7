#pragma once

// Slice-and-discriminate WGAN-GP training. A 3-D generator is trained against
// 2-D discriminators that see every axis-aligned slice of each generated
// volume, paired with real patches sampled from the training images.

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "volsynth/adam.hpp"
#include "volsynth/data.hpp"
#include "volsynth/error.hpp"
#include "volsynth/network.hpp"
#include "volsynth/ops.hpp"

namespace volsynth {

struct TrainConfig {
  /// Discriminator updates per generator update (n_D).
  std::size_t n_critic = 1;
  /// Generated volumes per discriminator update (m_D).
  std::size_t batch_d = 8;
  /// Generated volumes per generator update (m_G).
  std::size_t batch_g = 16;
  double gp_lambda = 10.0;
  AdamParams adam{};
  /// Depths shown to the discriminator per axis and volume: 32 or 64, or 0
  /// for every depth. Fewer than l depths form a contiguous window at a
  /// random offset, so every plane residue modulo 32 is covered.
  std::size_t slices_per_axis = 64;
  /// Discriminator index per axis (z, y, x). Isotropic training uses {0, 0, 0}.
  std::array<std::size_t, 3> axis_discriminator{0, 0, 0};
  /// Random quarter turns and flips of real patches; unset means on for
  /// isotropic and off for anisotropic training.
  std::optional<bool> augment;
  /// Total generator steps.
  std::size_t steps = 1000;
  std::uint64_t seed = 0;

  std::size_t n_discriminators() const {
    return 1 + std::max({axis_discriminator[0], axis_discriminator[1], axis_discriminator[2]});
  }

  std::size_t depths_per_axis(std::size_t edge) const { return slices_per_axis == 0 ? edge : slices_per_axis; }

  /// Throws ConfigError naming the offending field.
  void validate(std::size_t edge) const {
    if (n_critic < 1) throw ConfigError("train.n_critic: must be >= 1");
    if (batch_d < 1) throw ConfigError("train.batch_d: must be >= 1");
    if (batch_g < 1) throw ConfigError("train.batch_g: must be >= 1");
    if (!(gp_lambda >= 0)) throw ConfigError("train.gp_lambda: must be >= 0");
    if (!(adam.lr > 0)) throw ConfigError("train.adam.lr: must be > 0");
    if (!(adam.beta1 >= 0 && adam.beta1 < 1)) throw ConfigError("train.adam.beta1: must be in [0, 1)");
    if (!(adam.beta2 >= 0 && adam.beta2 < 1)) throw ConfigError("train.adam.beta2: must be in [0, 1)");
    if (!(adam.eps > 0)) throw ConfigError("train.adam.eps: must be > 0");
    if (slices_per_axis != 0 && slices_per_axis != 32 && slices_per_axis != 64)
      throw ConfigError("train.slices_per_axis: must be 32, 64 or 0 (every depth)");
    if (depths_per_axis(edge) > edge)
      throw ConfigError("train.slices_per_axis: " + std::to_string(slices_per_axis) + " exceeds the volume edge " +
                        std::to_string(edge));
    for (std::size_t a = 0; a < 3; ++a)
      if (axis_discriminator[a] > 2) throw ConfigError("train.axis_discriminator[" + std::to_string(a) + "]: must be 0, 1 or 2");
  }

  /// Settings for the CPU-scale preset.
  static TrainConfig desk() {
    TrainConfig c;
    c.batch_d = 2;
    c.batch_g = 4;
    c.slices_per_axis = 32;
    c.adam.lr = 5e-4;
    c.adam.beta1 = 0.5;
    c.steps = 800;
    return c;
  }
};

/// Trainable state: parameters, optimiser moments, step counter and RNG.
template <class T>
struct GanState {
  NetworkConfig net;
  Generator<T> generator;
  std::vector<Discriminator<T>> discriminators;
  AdamState<T> g_opt;
  std::vector<AdamState<T>> d_opt;
  std::uint64_t step = 0;
  std::mt19937_64 rng;

  static GanState init(const NetworkConfig& net, std::size_t n_discriminators, std::uint64_t seed) {
    net.validate();
    if (n_discriminators < 1 || n_discriminators > 3) throw UsageError("1 to 3 discriminators are supported");
    GanState s;
    s.net = net;
    s.rng.seed(seed);
    s.generator = Generator<T>(net, s.rng);
    for (std::size_t i = 0; i < n_discriminators; ++i) s.discriminators.emplace_back(net, s.rng);
    s.g_opt = AdamState<T>::for_params(s.generator.params());
    for (const auto& d : s.discriminators) s.d_opt.push_back(AdamState<T>::for_params(d.params()));
    return s;
  }
};

struct StepMetrics {
  std::uint64_t step = 0;
  /// Mean per-slice discriminator loss for each axis (z, y, x), last critic update.
  std::array<double, 3> d_loss{0, 0, 0};
  double g_loss = 0;
  /// mean D(real) - mean D(fake) over the last critic update.
  double wasserstein = 0;
  /// Discriminator evaluations on fake slices and on real patches during the critic updates.
  std::size_t fake_evaluations = 0;
  std::size_t real_evaluations = 0;
  double wall_ms = 0;
};

inline std::string metrics_csv_header() { return "step,d_loss_z,d_loss_y,d_loss_x,g_loss,wasserstein_estimate,wall_ms\n"; }

inline std::string metrics_csv_row(const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%llu,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f\n", static_cast<unsigned long long>(m.step),
                m.d_loss[0], m.d_loss[1], m.d_loss[2], m.g_loss, m.wasserstein, m.wall_ms);
  return buf;
}

// ---------------------------------------------------------------------------
// Losses

/// Per-slice critic terms for a batch of fake slices, real patches and
/// interpolation weights.
template <class T>
struct CriticTerms {
  BasicTensor<T> d_fake;   // [B]
  BasicTensor<T> d_real;   // [B]
  BasicTensor<T> penalty;  // [B], (||grad_k D(k)|| - 1)^2
  BasicTensor<T> loss;     // [B], d_fake - d_real + lambda * penalty
};

/// `critic` maps [B, ...] to [B]. The penalty gradient is recorded so `loss`
/// can be differentiated with respect to the critic's parameters.
template <class T, class Critic>
CriticTerms<T> critic_terms(const Critic& critic, const BasicTensor<T>& fake, const BasicTensor<T>& real,
                            const BasicTensor<T>& eps, T lambda) {
  if (fake.shape() != real.shape())
    throw DimensionError("fake " + shape_str(fake.shape()) + " and real " + shape_str(real.shape()) + " differ");
  const std::size_t b = fake.dim(0), inner = fake.numel() / b;
  if (eps.shape() != Shape{b}) throw DimensionError("one interpolation weight per slice is required");
  std::vector<T> kd(fake.numel());
  for (std::size_t i = 0; i < b; ++i) {
    const T e = eps[i];
    for (std::size_t j = 0; j < inner; ++j)
      kd[i * inner + j] = e * fake[i * inner + j] + (T(1) - e) * real[i * inner + j];
  }
  BasicTensor<T> k(fake.shape(), std::move(kd), true);

  GradModeGuard on(true);
  CriticTerms<T> t;
  t.d_fake = critic(fake.detach());
  t.d_real = critic(real.detach());
  const auto d_k = critic(k);
  const auto g_k = grad(sum(d_k), {k}, {.create_graph = true})[0];
  t.penalty = square(add_scalar(norm_per_sample(g_k), T(-1)));
  t.loss = add(sub(t.d_fake, t.d_real), scale(t.penalty, lambda));
  return t;
}

/// Mean critic loss D(f_s) - D(r) + lambda (||grad_k D(k)|| - 1)^2 over the batch.
template <class T, class Critic>
BasicTensor<T> d_loss(const Critic& critic, const BasicTensor<T>& fake, const BasicTensor<T>& real,
                      const BasicTensor<T>& eps, T lambda) {
  return mean(critic_terms(critic, fake, real, eps, lambda).loss);
}

/// As above with eps ~ U[0, 1] drawn per slice.
template <class T, class Critic, class Rng>
BasicTensor<T> d_loss(const Critic& critic, const BasicTensor<T>& fake, const BasicTensor<T>& real, T lambda, Rng& rng) {
  return d_loss(critic, fake, real, BasicTensor<T>::uniform(Shape{fake.dim(0)}, rng, T(0), T(1)), lambda);
}

/// Mean generator loss -D(f_s) over the batch.
template <class T, class Critic>
BasicTensor<T> g_loss(const Critic& critic, const BasicTensor<T>& fake) {
  return neg(mean(critic(fake)));
}

template <class T>
auto critic_of(const Discriminator<T>& d) {
  return [&d](const BasicTensor<T>& x) { return d.forward(x); };
}

// ---------------------------------------------------------------------------
// Training

/// Receives every batch of fake slices shown to a discriminator during the
/// critic updates, as [depths, n_phases, l, l] per volume and axis.
template <class T>
using SliceObserver = std::function<void(Axis, const std::vector<std::size_t>& depths, const BasicTensor<T>& slices)>;

namespace detail {

template <class T>
void accumulate(std::vector<std::vector<T>>& acc, const std::vector<BasicTensor<T>>& g) {
  if (acc.empty())
    for (const auto& t : g) acc.emplace_back(t.numel(), T(0));
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < acc[i].size(); ++j) acc[i][j] += g[i][j];
}

template <class T>
std::vector<BasicTensor<T>> as_tensors(const std::vector<std::vector<T>>& acc, const std::vector<BasicTensor<T>>& like) {
  std::vector<BasicTensor<T>> out;
  for (std::size_t i = 0; i < like.size(); ++i)
    out.emplace_back(like[i].shape(), acc.empty() ? std::vector<T>(like[i].numel(), T(0)) : acc[i]);
  return out;
}

template <class Rng>
std::vector<std::size_t> pick_depths(std::size_t edge, std::size_t count, Rng& rng) {
  std::size_t start = 0;
  if (count < edge) start = std::uniform_int_distribution<std::size_t>(0, edge - count)(rng);
  std::vector<std::size_t> d(count);
  std::iota(d.begin(), d.end(), start);
  return d;
}

template <class T>
BasicTensor<T> latent(const NetworkConfig& net, std::size_t z_spatial, std::mt19937_64& rng) {
  return BasicTensor<T>::randn(Shape{1, net.latent_channels, z_spatial, z_spatial, z_spatial}, rng);
}

}  // namespace detail

/// One generator step preceded by n_critic discriminator updates.
///
/// Isotropic sets (one discriminator) sum the slice losses of all three axes
/// into a single update. Otherwise each axis updates its own discriminator in
/// turn, and the generator receives one update per axis with all three
/// gradients taken from the same generated batch. Every loss is normalised
/// by the number of slice losses it sums.
template <class T>
StepMetrics train_step(GanState<T>& st, const TrainingSet& data, const TrainConfig& cfg,
                       const SliceObserver<T>& observer = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  data.validate();
  const std::size_t l = st.net.training_edge();
  cfg.validate(l);
  if (st.discriminators.size() != cfg.n_discriminators())
    throw UsageError("state holds " + std::to_string(st.discriminators.size()) + " discriminators, config expects " +
                     std::to_string(cfg.n_discriminators()));
  if (data.images.front().n_phases != st.net.n_phases)
    throw UsageError("training images have " + std::to_string(data.images.front().n_phases) +
                     " phases, network expects " + std::to_string(st.net.n_phases));
  if (data.isotropic && cfg.n_discriminators() != 1)
    throw UsageError("isotropic training uses one discriminator for every axis");

  const bool isotropic = data.isotropic;
  const bool augment = cfg.augment.value_or(isotropic);
  const std::size_t depth_count = cfg.depths_per_axis(l);
  const T lambda = static_cast<T>(cfg.gp_lambda);
  const Axis axes[3] = {Axis::z, Axis::y, Axis::x};
  auto& rng = st.rng;

  StepMetrics m;
  m.step = st.step + 1;

  // Critic updates.
  for (std::size_t t = 0; t < cfg.n_critic; ++t) {
    std::vector<BasicTensor<T>> volumes;
    {
      NoGradGuard no_grad;
      for (std::size_t i = 0; i < cfg.batch_d; ++i)
        volumes.push_back(st.generator.forward(detail::latent<T>(st.net, st.net.latent_spatial, rng)));
    }
    std::array<double, 3> loss_sum{0, 0, 0};
    double fake_sum = 0, real_sum = 0;

    auto volume_axis = [&](std::size_t i, std::size_t a, T weight, std::vector<std::vector<T>>& acc) {
      auto& disc = st.discriminators[cfg.axis_discriminator[a]];
      const auto depths = detail::pick_depths(l, depth_count, rng);
      const auto fake = slice_planes(volumes[i], axes[a], depths);
      if (observer) observer(axes[a], depths, fake);
      const auto real = sample_patches<T>(data.for_axis(axes[a]), l, depth_count, rng, augment);
      const auto eps = BasicTensor<T>::uniform(Shape{depth_count}, rng, T(0), T(1));
      const auto terms = critic_terms(critic_of(disc), fake, real, eps, lambda);
      m.fake_evaluations += depth_count;
      m.real_evaluations += depth_count;
      for (std::size_t d = 0; d < depth_count; ++d) {
        loss_sum[a] += static_cast<double>(terms.loss[d]);
        fake_sum += static_cast<double>(terms.d_fake[d]);
        real_sum += static_cast<double>(terms.d_real[d]);
      }
      GradModeGuard on(true);
      detail::accumulate(acc, grad(scale(sum(terms.loss), weight), disc.params()));
    };

    if (isotropic) {
      std::vector<std::vector<T>> acc;
      const T w = T(1) / static_cast<T>(cfg.batch_d * 3 * depth_count);
      for (std::size_t i = 0; i < cfg.batch_d; ++i)
        for (std::size_t a = 0; a < 3; ++a) volume_axis(i, a, w, acc);
      auto& d = st.discriminators[0];
      adam_step(d.params(), detail::as_tensors(acc, d.params()), st.d_opt[0], cfg.adam);
    } else {
      const T w = T(1) / static_cast<T>(cfg.batch_d * depth_count);
      for (std::size_t a = 0; a < 3; ++a) {
        std::vector<std::vector<T>> acc;
        for (std::size_t i = 0; i < cfg.batch_d; ++i) volume_axis(i, a, w, acc);
        const std::size_t di = cfg.axis_discriminator[a];
        auto& d = st.discriminators[di];
        adam_step(d.params(), detail::as_tensors(acc, d.params()), st.d_opt[di], cfg.adam);
      }
    }
    const double per_axis = static_cast<double>(cfg.batch_d * depth_count);
    for (std::size_t a = 0; a < 3; ++a) m.d_loss[a] = loss_sum[a] / per_axis;
    m.wasserstein = (real_sum - fake_sum) / (3 * per_axis);
  }

  // Generator update(s).
  {
    GradModeGuard on(true);
    auto& theta = st.generator.params();
    std::array<std::vector<std::vector<T>>, 3> acc;
    double g_sum = 0;
    const std::size_t per_update = isotropic ? cfg.batch_g * 3 * depth_count : cfg.batch_g * depth_count;
    const T w = T(-1) / static_cast<T>(per_update);
    for (std::size_t j = 0; j < cfg.batch_g; ++j) {
      const auto f = st.generator.forward(detail::latent<T>(st.net, st.net.latent_spatial, rng));
      BasicTensor<T> total;
      for (std::size_t a = 0; a < 3; ++a) {
        const auto depths = detail::pick_depths(l, depth_count, rng);
        const auto scores = st.discriminators[cfg.axis_discriminator[a]].forward(slice_planes(f, axes[a], depths));
        const auto s = sum(scores);
        g_sum -= static_cast<double>(s.item());
        if (isotropic) {
          total = total.defined() ? add(total, s) : s;
        } else {
          detail::accumulate(acc[a], grad(scale(s, w), theta));
        }
      }
      if (isotropic) detail::accumulate(acc[0], grad(scale(total, w), theta));
    }
    for (std::size_t a = 0; a < (isotropic ? 1u : 3u); ++a)
      adam_step(theta, detail::as_tensors(acc[a], theta), st.g_opt, cfg.adam);
    m.g_loss = g_sum / static_cast<double>(cfg.batch_g * 3 * depth_count);
  }

  ++st.step;
  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

/// Runs train_step until state.step reaches cfg.steps, reporting each step.
template <class T>
void train(GanState<T>& st, const TrainingSet& data, const TrainConfig& cfg,
           const std::function<void(const StepMetrics&)>& on_step = {}) {
  while (st.step < cfg.steps) {
    const auto m = train_step(st, data, cfg);
    if (on_step) on_step(m);
  }
}

/// Samples z ~ N(0, 1) with the given spatial extent and returns the
/// generator's phase probabilities.
template <class T>
PhaseVolume generate(const Generator<T>& g, std::size_t z_spatial, std::uint64_t seed) {
  const auto& net = g.config();
  if (z_spatial < net.latent_spatial)
    throw UsageError("latent spatial size " + std::to_string(z_spatial) + " is below the training size " +
                     std::to_string(net.latent_spatial));
  std::mt19937_64 rng(seed);
  NoGradGuard no_grad;
  return probability_volume(g.forward(detail::latent<T>(net, z_spatial, rng)));
}

}  // namespace volsynth
