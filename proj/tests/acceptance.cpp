// Acceptance run: one PASS/FAIL line per criterion. Exits nonzero if any fails.
//
//   acceptance            all criteria
//   acceptance 1 5 8      selected criteria

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "gradcheck.hpp"
#include "volsynth/checkpoint.hpp"
#include "volsynth/info_density.hpp"
#include "volsynth/metrics.hpp"
#include "volsynth/synthetic.hpp"
#include "volsynth/trainer.hpp"

using namespace volsynth;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Outcome density_oracle() {
  const auto t0 = Clock::now();
  const auto m = density::density_map_1layer(3, ConvSpec{4, 2, 0, 1, 1}, 2);
  const bool shape = m.extents == std::vector<std::size_t>{8, 8};
  bool ok = shape;
  if (shape) {
    for (std::size_t y : {0, 7})
      for (std::size_t x : {0, 7}) ok = ok && m.at({y, x}) == 1;
    for (std::size_t y : {3, 4})
      for (std::size_t x : {3, 4}) ok = ok && m.at({y, x}) == 4;
  }
  const double s = seconds_since(t0);
  return {ok && s < 1.0, fmt("8x8 map, corner %lld, centre %lld, %.4f s", static_cast<long long>(shape ? m.at({0, 0}) : -1),
                             static_cast<long long>(shape ? m.at({3, 3}) : -1), s)};
}

Outcome rule_enumeration() {
  const auto t0 = Clock::now();
  const auto sets = density::enumerate_practical_sets(6);
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> got, want{{4, 2, 2}, {6, 3, 3}, {6, 2, 4}};
  std::string list;
  for (const auto& c : sets) {
    got.insert({c.k, c.s, c.p});
    list += to_string(c);
  }
  const double s = seconds_since(t0);
  return {got == want && sets.size() == 3 && s < 1.0, fmt("%s, %.4f s", list.c_str(), s)};
}

Outcome shape_chain() {
  // Each layer is run as an actual single-channel (transpose) convolution and
  // its output extent compared with the expected chain.
  const auto net = NetworkConfig::table1();
  const std::vector<std::size_t> g_want{4, 6, 10, 18, 34, 64}, d_want{64, 32, 16, 8, 4, 1};
  std::mt19937_64 rng(1);
  std::vector<std::size_t> g_got{4}, d_got{64};
  bool ok = true;
  for (const auto& l : net.generator) {
    const std::size_t e = g_got.back();
    const auto y = conv_transpose(Tensor::zeros({1, 1, e, e, e}), Tensor::zeros({1, 1, l.k, l.k, l.k}), l.s, l.p);
    ok = ok && y.dim(2) == y.dim(3) && y.dim(3) == y.dim(4);
    g_got.push_back(y.dim(2));
  }
  for (const auto& l : net.discriminator) {
    const std::size_t e = d_got.back();
    const auto y = conv(Tensor::zeros({1, 1, e, e}), Tensor::zeros({1, 1, l.k, l.k}), l.s, l.p);
    ok = ok && y.dim(2) == y.dim(3);
    d_got.push_back(y.dim(2));
  }
  std::vector<std::size_t> g_formula, d_formula;
  for (auto v : net.generator_extents(4)) g_formula.push_back(static_cast<std::size_t>(v));
  for (auto v : net.discriminator_extents(64)) d_formula.push_back(static_cast<std::size_t>(v));
  ok = ok && g_got == g_want && d_got == d_want && g_formula == g_want && d_formula == d_want;
  auto join = [](const std::vector<std::size_t>& v) {
    std::string s;
    for (auto x : v) s += (s.empty() ? "" : "->") + std::to_string(x);
    return s;
  };
  return {ok, "G " + join(g_got) + ", D " + join(d_got)};
}

Outcome periodicity() {
  const auto net = NetworkConfig::table1();
  const auto period = density::kernel_periodicity(net.generator);
  const auto measured = density::measured_repeat_distance(density::striped_profile(net.generator, 4));
  // Random kernel values rule out coincidental repeats.
  std::mt19937_64 rng(5);
  std::vector<std::vector<std::uint64_t>> values;
  for (const auto& l : net.generator) {
    std::vector<std::uint64_t> v(l.k);
    for (auto& x : v) x = rng();
    values.push_back(v);
  }
  const auto measured_random =
      density::measured_repeat_distance(density::striped_profile(net.generator, 4, values));
  return {period == 32 && measured == 32 && measured_random == 32,
          fmt("product of strides %zu, striped-kernel repeat %zu (random kernels %zu)", period, measured,
              measured_random)};
}

Outcome gradients() {
  std::mt19937_64 rng(11);
  std::size_t trials = 0;
  double worst = 0;
  std::string worst_name = "none";
  auto check = [&](const char* name, const gradcheck::ScalarFn& f, const std::vector<Tensor>& in) {
    ++trials;
    const double e = gradcheck::gradient_relative_error(f, in);
    if (!(e <= worst)) {
      worst = e;
      worst_name = name;
    }
  };
  for (int rep = 0; rep < 6; ++rep) {
    auto a = Tensor::randn({2, 3, 3, 3}, rng), b = Tensor::randn({2, 3, 3, 3}, rng);
    auto c = Tensor::randn({2, 3, 3, 3}, rng);
    auto pos = Tensor::uniform({2, 3, 3, 3}, rng, 0.5, 2.0);
    auto bias = Tensor::randn({3}, rng), gamma = Tensor::uniform({3}, rng, 0.5, 1.5);
    auto v = Tensor::randn({2}, rng);
    check("add", [&](auto& in) { return sum(mul(add(in[0], in[1]), c)); }, {a, b});
    check("sub", [&](auto& in) { return sum(mul(sub(in[0], in[1]), c)); }, {a, b});
    check("mul", [&](auto& in) { return sum(mul(mul(in[0], in[1]), c)); }, {a, b});
    check("div", [&](auto& in) { return sum(mul(div(in[0], in[1]), c)); }, {a, pos});
    check("scale", [&](auto& in) { return sum(mul(scale(in[0], 1.7), c)); }, {a});
    check("add_scalar", [&](auto& in) { return sum(square(add_scalar(in[0], -0.3))); }, {a});
    check("neg", [&](auto& in) { return sum(mul(neg(in[0]), c)); }, {a});
    check("square", [&](auto& in) { return sum(mul(square(in[0]), c)); }, {a});
    check("sqrt", [&](auto& in) { return sum(mul(sqrt(in[0]), c)); }, {pos});
    check("clamp_min", [&](auto& in) { return sum(mul(clamp_min(in[0], 0.1), c)); }, {pos});
    check("relu", [&](auto& in) { return sum(mul(relu(in[0]), c)); }, {a});
    check("leaky_relu", [&](auto& in) { return sum(mul(leaky_relu(in[0], 0.2), c)); }, {a});
    check("softmax", [&](auto& in) { return sum(mul(softmax_channels(in[0]), c)); }, {a});
    check("mean", [&](auto& in) { return square(mean(mul(in[0], c))); }, {a});
    check("sum_channels", [&](auto& in) { return sum(square(sum_channels(in[0]))); }, {a});
    check("bias", [&](auto& in) { return sum(mul(add_bias(in[0], in[1]), c)); }, {a, bias});
    check("sum_to_bias", [&](auto& in) { return sum(square(sum_to_bias(mul(in[0], c)))); }, {a});
    check("batch_norm", [&](auto& in) { return sum(mul(batch_norm(in[0], in[1], in[2]), c)); }, {a, gamma, bias});
    check("per_sample", [&](auto& in) { return sum(mul(broadcast_per_sample(in[1], a.shape()), mul(in[0], c))); },
          {a, v});
    check("sum_per_sample", [&](auto& in) { return sum(mul(sum_per_sample(mul(in[0], c)), v)); }, {a});
    check("norm", [&](auto& in) { return sum(mul(norm_per_sample(in[0]), v)); }, {a});
    check("permute", [&](auto& in) { return sum(mul(permute(in[0], {2, 0, 3, 1}), permute(c, {2, 0, 3, 1}))); }, {a});
    check("select", [&](auto& in) { return sum(square(select_batch(in[0], {1, 0, 1}))); }, {a});
    check("reshape", [&](auto& in) { return sum(mul(reshape(in[0], {6, 9}), reshape(c, {6, 9}))); }, {a});
    auto w2 = Tensor::randn({2, 3, 2, 2}, rng);
    check("conv2d", [&](auto& in) { return sum(square(conv(in[0], in[1], 1, 1))); }, {a, w2});
    auto w3 = Tensor::randn({3, 2, 2, 2}, rng);
    check("conv_transpose2d", [&](auto& in) { return sum(square(conv_transpose(in[0], in[1], 2, 1))); }, {a, w3});
    auto x3 = Tensor::randn({1, 2, 3, 3, 3}, rng);
    auto w33 = Tensor::randn({2, 2, 2, 2, 2}, rng);
    check("conv_transpose3d", [&](auto& in) { return sum(square(conv_transpose(in[0], in[1], 2, 1))); }, {x3, w33});
    check("conv3d", [&](auto& in) { return sum(square(conv(in[0], in[1], 1, 0))); }, {x3, w33});
    auto vol = Tensor::randn({1, 2, 4, 4, 4}, rng), planes_w = Tensor::randn({3, 2, 4, 4}, rng);
    check("slice_planes", [&](auto& in) { return sum(mul(slice_planes(in[0], Axis::y, {0, 2, 3}), planes_w)); }, {vol});
  }

  // Full critic loss including the second-order gradient-penalty path, with
  // respect to every discriminator parameter.
  NetworkConfig net;
  net.n_phases = 2;
  net.latent_channels = 2;
  net.latent_spatial = 3;
  net.generator = {{4, 2, 2, 2, 3}, {4, 2, 2, 3, 2}};
  net.discriminator = {{4, 2, 1, 2, 3}, {3, 1, 0, 3, 1}};
  for (int rep = 0; rep < 20; ++rep) {
    Discriminator<double> d(net, rng);
    const auto f = Tensor::uniform(Shape{3, 2, 6, 6}, rng, 0.0, 1.0);
    const auto r = Tensor::uniform(Shape{3, 2, 6, 6}, rng, 0.0, 1.0);
    const auto eps = Tensor::uniform(Shape{3}, rng, 0.0, 1.0);
    check("d_loss", [&](const std::vector<Tensor>& p) {
      GradModeGuard on(true);
      std::vector<Tensor> params;
      for (const auto& t : p) params.push_back(t.requires_grad() ? t : Tensor(t.shape(), t.data(), true));
      const Discriminator<double> dd(net, params);
      return d_loss(critic_of(dd), f, r, eps, 10.0);
    }, d.params());
  }
  return {trials >= 100 && worst < 1e-4,
          fmt("%zu trials, worst relative error %.2e (%s)", trials, worst, worst_name.c_str())};
}

Outcome adjointness() {
  std::mt19937_64 rng(7);
  double worst = 0, worst_abs = 0;
  int trials = 0;
  for (int t = 0; t < 20; ++t, ++trials) {
    const std::size_t k = 2 + t % 3, s = 1 + t % 2, p = t % 2, rank = t % 2 == 0 ? 3 : 2;
    ConvPlan plan;
    plan.spatial_rank = rank;
    plan.geom = kernels::ConvGeometry::from_input(2, 3, 4, rank == 3 ? kernels::Extent3{9, 8, 7} : kernels::Extent3{1, 11, 10},
                                                  detail::iso3(k, rank, 1), detail::iso3(s, rank, 1),
                                                  detail::iso3(p, rank, 0));
    const auto x = Tensor::randn(plan.input_shape(2), rng), w = Tensor::randn(plan.weight_shape(), rng);
    const auto y = Tensor::randn(plan.output_shape(2), rng);
    const auto cx = conv_apply(x, w, plan), ty = conv_adjoint_data(y, w, plan);
    double lhs = 0, rhs = 0, scale = 0;
    for (std::size_t i = 0; i < cx.numel(); ++i) lhs += cx.data()[i] * y.data()[i];
    for (std::size_t i = 0; i < x.numel(); ++i) rhs += x.data()[i] * ty.data()[i];
    scale = std::max(1.0, std::abs(lhs));
    worst = std::max(worst, std::abs(lhs - rhs) / scale);
    worst_abs = std::max(worst_abs, std::abs(lhs - rhs));
  }
  return {worst < 1e-10 && worst_abs < 1e-10,
          fmt("%d random 2-D/3-D plans, max |<Ax, y> - <x, A'y>| = %.2e (relative %.2e)", trials, worst_abs, worst)};
}

Outcome slicing() {
  // A full-size generated volume: table1 generator at its training latent size.
  std::mt19937_64 rng(3);
  const auto net = NetworkConfig::table1();
  const Generator<float> g(net, rng);
  TensorF f;
  {
    NoGradGuard no_grad;
    const auto out = g.forward(detail::latent<float>(net, net.latent_spatial, rng));
    f = reshape(out, Shape{out.dim(1), out.dim(2), out.dim(3), out.dim(4)});
  }
  const std::size_t n = f.dim(0), l = f.dim(1);
  const auto slices = slice_volume(f);
  std::size_t counts[3] = {0, 0, 0}, mismatches = 0;
  for (const auto& s : slices) {
    ++counts[static_cast<std::size_t>(s.axis)];
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j < l; ++j) {
          std::size_t z = s.depth, y = i, x = j;
          if (s.axis == Axis::y) std::tie(z, y, x) = std::tuple{i, s.depth, j};
          if (s.axis == Axis::x) std::tie(z, y, x) = std::tuple{i, j, s.depth};
          const float want = f.data()[((c * l + z) * l + y) * l + x];
          const float got = s.plane.data()[(c * l + i) * l + j];
          if (std::memcmp(&want, &got, sizeof want) != 0) ++mismatches;
        }
  }
  return {l == 64 && slices.size() == 192 && counts[0] == 64 && counts[1] == 64 && counts[2] == 64 && mismatches == 0,
          fmt("%zu-phase %zu^3 volume: %zu slices (%zu/%zu/%zu per axis), %zu mismatched values", n, l, slices.size(),
              counts[0], counts[1], counts[2], mismatches)};
}

Outcome metric_oracles() {
  std::string detail;
  bool ok = true;
  auto timed = [&](const char* name, const std::function<std::pair<bool, std::string>()>& fn) {
    const auto t0 = Clock::now();
    const auto [pass, what] = fn();
    const double s = seconds_since(t0);
    ok = ok && pass && s < 30.0;
    detail += fmt("%s%s %s (%.2f s)", detail.empty() ? "" : "; ", name, what.c_str(), s);
  };
  const std::size_t e = 32;
  timed("dense", [&] {
    const auto v = PhaseVolume::from_labels(e, e, e, 2, std::vector<std::uint8_t>(e * e * e, 1));
    const double d = metrics::relative_diffusivity(v, 1, Axis::z).d_rel;
    return std::pair{std::abs(d - 1.0) <= 1e-3, fmt("d_rel=%.6f", d)};
  });
  timed("channels", [&] {
    std::vector<std::uint8_t> l(e * e * e);
    for (std::size_t z = 0; z < e; ++z)
      for (std::size_t y = 0; y < e; ++y)
        for (std::size_t x = 0; x < e; ++x) l[(z * e + y) * e + x] = static_cast<std::uint8_t>((y / 2 + x / 2) % 2);
    const auto v = PhaseVolume::from_labels(e, e, e, 2, l);
    const double d = metrics::relative_diffusivity(v, 1, Axis::z).d_rel;
    return std::pair{std::abs(d - 0.5) <= 1e-3 && metrics::volume_fraction(v)[1] == 0.5, fmt("d_rel=%.6f", d)};
  });
  timed("blocked", [&] {
    std::vector<std::uint8_t> l(e * e * e, 1);
    for (std::size_t i = 0; i < e * e; ++i) l[(e / 2) * e * e + i] = 0;
    const double d = metrics::relative_diffusivity(PhaseVolume::from_labels(e, e, e, 2, l), 1, Axis::z).d_rel;
    return std::pair{d == 0.0, fmt("d_rel=%g", d)};
  });
  std::mt19937_64 rng(4);
  std::bernoulli_distribution coin(0.35);
  std::vector<std::uint8_t> l(48 * 48 * 48);
  for (auto& x : l) x = coin(rng);
  const auto random = PhaseVolume::from_labels(48, 48, 48, 2, l);
  timed("S2(0)", [&] {
    const auto s = metrics::two_point_correlation(random, 1, 20);
    return std::pair{s[0].value == 1.0, fmt("%.17g", s[0].value)};
  });
  timed("S2 tail", [&] {
    const auto s = metrics::two_point_correlation(random, 1, 20);
    const double phi = metrics::volume_fraction(random)[1];
    const double pairs = 3.0 * 48 * 48 * (48 - 20);
    const double sigma = std::sqrt(phi * phi * (1 - phi * phi) / pairs) / phi;
    double worst = 0;
    for (std::size_t r = 10; r <= 20; ++r) worst = std::max(worst, std::abs(s[r].value - phi) / sigma);
    return std::pair{worst <= 3.0, fmt("max |S(r)/phi - phi| = %.2f sigma for r in [10, 20]", worst)};
  });
  timed("TPB", [&] {
    const auto v = PhaseVolume::from_labels(16, 16, 16, 3, std::vector<std::uint8_t>(4096, 2));
    const double t = metrics::tpb_density(v);
    return std::pair{t == 0.0, fmt("single phase %g", t)};
  });
  return {ok, detail};
}

struct SmokeRun {
  bool finite = true;
  double image_fraction = 0, generated_fraction = 0;
  double first_decile = 0, final_decile = 0;
  std::size_t steps = 0;
  double seconds = 0;
  std::string checkpoint;
};

Micrograph smoke_image() { return blob_micrograph(128, 0.3, 4, 1); }

SmokeRun smoke_train(std::uint64_t seed) {
  const auto t0 = Clock::now();
  SmokeRun run;
  const TrainingSet data{{smoke_image()}, {0, 0, 0}, true};
  const auto net = NetworkConfig::desk(2);
  auto cfg = TrainConfig::desk();
  cfg.seed = seed;
  auto st = GanState<float>::init(net, cfg.n_discriminators(), seed);
  std::vector<double> w;
  try {
    train(st, data, cfg, [&](const StepMetrics& m) {
      for (double v : {m.d_loss[0], m.d_loss[1], m.d_loss[2], m.g_loss, m.wasserstein})
        run.finite = run.finite && std::isfinite(v);
      w.push_back(m.wasserstein);
    });
  } catch (const NumericError&) {
    run.finite = false;
  }
  run.steps = st.step;
  const std::size_t k = std::max<std::size_t>(1, w.size() / 10);
  for (std::size_t i = 0; i < k && w.size() >= k; ++i) {
    run.first_decile += w[i] / static_cast<double>(k);
    run.final_decile += w[w.size() - k + i] / static_cast<double>(k);
  }
  const auto image_vf = metrics::volume_fraction(data.images[0]);
  const auto major = metrics::majority_phase(image_vf);
  run.image_fraction = image_vf[major];
  run.generated_fraction =
      metrics::volume_fraction(decode_phases(generate(st.generator, net.latent_spatial, seed)))[major];
  run.checkpoint = format_checkpoint(st);
  run.seconds = seconds_since(t0);
  return run;
}

std::vector<SmokeRun>& smoke_runs() {
  static std::vector<SmokeRun> runs;
  return runs;
}

Outcome smoke_training() {
  int passes = 0;
  bool all_finite = true, within_budget = true;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto run = smoke_train(seed);
    const bool b = std::abs(run.generated_fraction - run.image_fraction) <= 0.10;
    const bool c = run.final_decile < run.first_decile;
    all_finite = all_finite && run.finite;
    within_budget = within_budget && run.steps <= 2000 && run.seconds <= 1800;
    passes += b && c;
    detail += fmt("%sseed %llu: %zu steps %.0f s, finite %s, majority vf %.3f vs %.3f (%s), W deciles %.3f -> %.3f (%s)",
                  detail.empty() ? "" : "; ", static_cast<unsigned long long>(seed), run.steps, run.seconds,
                  run.finite ? "yes" : "no", run.generated_fraction, run.image_fraction, b ? "ok" : "miss",
                  run.first_decile, run.final_decile, c ? "ok" : "miss");
    smoke_runs().push_back(std::move(run));
  }
  return {all_finite && within_budget && passes >= 2, fmt("%d/3 seeds pass (b) and (c); ", passes) + detail};
}

Outcome determinism() {
  if (smoke_runs().empty()) smoke_runs().push_back(smoke_train(1));
  const auto again = smoke_train(1);
  const auto& first = smoke_runs().front().checkpoint;
  return {first == again.checkpoint && !first.empty(),
          fmt("repeat of seed 1: %zu-byte checkpoints %s", first.size(),
              first == again.checkpoint ? "identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"information density oracle", density_oracle},
      {"rule enumeration", rule_enumeration},
      {"shape chain", shape_chain},
      {"kernel periodicity", periodicity},
      {"gradient correctness", gradients},
      {"convolution adjointness", adjointness},
      {"slicing", slicing},
      {"metric oracles", metric_oracles},
      {"desk-scale smoke training", smoke_training},
      {"determinism", determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(n)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %2d %s  %s: %s [%.2f s]\n", n, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
