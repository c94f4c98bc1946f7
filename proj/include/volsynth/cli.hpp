#pragma once

// Command-line front end: ingest, analyze, train, generate, metrics and
// compare subcommands behind one dispatch function. Errors are reported on the
// error stream as one JSON line {"error": category, "message": ...} and mapped
// to an exit code by category. Commands that write files also write a
// manifest recording the resolved options, their hash, seed, versions and
// wall time.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "volsynth/checkpoint.hpp"
#include "volsynth/config.hpp"
#include "volsynth/info_density.hpp"
#include "volsynth/io.hpp"
#include "volsynth/metrics.hpp"
#include "volsynth/parallel.hpp"
#include "volsynth/trainer.hpp"

namespace volsynth::cli {

#ifdef VOLSYNTH_VERSION
inline constexpr const char* kVersion = VOLSYNTH_VERSION;
#else
inline constexpr const char* kVersion = "0.1.0";
#endif
inline constexpr const char* kVolumeExtension = ".vol";

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

struct GlobalOptions {
  std::optional<std::size_t> threads;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> precision;
  std::optional<fs::path> manifest;
};

struct Context {
  GlobalOptions global;
  std::vector<std::string> argv;
  std::ostream& out;
  std::ostream& err;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
};

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string config_hash(const ojson& config) {
  const auto s = config.dump();
  return "fnv1a64:" + hex64(fnv1a64(s.data(), s.size()));
}

inline ojson versions() {
  return {{"volsynth", kVersion},
          {"config_schema", kConfigSchemaVersion},
          {"checkpoint_format", kCheckpointVersion},
          {"volume_format", io::kVolumeVersion},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"compiler", __VERSION__}};
}

/// Writes the manifest. `outputs` are hashed so a re-run can be checked byte for byte.
inline void write_manifest(const Context& ctx, const fs::path& default_path, const std::string& command,
                           const ojson& config, std::uint64_t seed, const std::vector<fs::path>& outputs) {
  const fs::path path = ctx.global.manifest.value_or(default_path);
  ojson m;
  m["tool"] = "volsynth";
  m["command"] = command;
  m["argv"] = ctx.argv;
  m["config_hash"] = config_hash(config);
  m["seed"] = seed;
  m["threads"] = num_threads();
  m["versions"] = versions();
  m["config"] = config;
  ojson outs = ojson::array();
  for (const auto& p : outputs) {
    const auto bytes = io::read_file(p);
    outs.push_back({{"path", p.generic_string()}, {"bytes", bytes.size()},
                    {"fnv1a64", hex64(fnv1a64(bytes.data(), bytes.size()))}});
  }
  m["outputs"] = outs;
  m["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count();
  io::write_file(path, m.dump(2) + "\n");
}

inline std::string json_line(const ojson& j) { return j.dump() + "\n"; }

// ---------------------------------------------------------------------------
// ingest

inline int run_ingest(Context& ctx, const std::vector<fs::path>& files, std::size_t n_phases) {
  ojson cfg{{"files", ojson::array()}, {"n_phases", n_phases}};
  for (const auto& f : files) {
    cfg["files"].push_back(f.generic_string());
    ojson line;
    line["file"] = f.generic_string();
    if (f.extension() == kVolumeExtension) {
      auto v = io::read_volume(f);
      if (!v.has_labels()) v = decode_phases(v);
      line["kind"] = "volume";
      line["extents"] = {v.depth, v.height, v.width};
      line["n_phases"] = v.n_phases;
      std::vector<std::size_t> h(v.n_phases, 0);
      for (auto l : v.labels) ++h[l];
      line["histogram"] = h;
      line["fractions"] = metrics::volume_fraction(v);
    } else {
      const auto m = io::read_micrograph(f, n_phases);
      line["kind"] = "micrograph";
      line["extents"] = {m.height, m.width};
      line["n_phases"] = m.n_phases;
      std::vector<std::size_t> h(m.n_phases, 0);
      for (auto l : m.labels) ++h[l];
      line["histogram"] = h;
      line["fractions"] = metrics::volume_fraction(m);
    }
    ctx.out << json_line(line);
  }
  if (ctx.global.manifest) write_manifest(ctx, *ctx.global.manifest, "ingest", cfg, ctx.global.seed.value_or(0), {});
  return 0;
}

// ---------------------------------------------------------------------------
// analyze

/// Accepts a run configuration (its "network" member) or a bare network object.
inline NetworkConfig network_for_analysis(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  if (j.contains("schema_version")) return network_from_json(j.value("network", nlohmann::json::object()));
  if (j.contains("network")) return network_from_json(j["network"]);
  return network_from_json(j);
}

inline int run_analyze(Context& ctx, const fs::path& config_path, std::optional<std::size_t> zsize,
                       const std::optional<fs::path>& out_dir, const std::string& format) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(config_path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(config_path.generic_string() + ": " + e.what());
  }
  const auto net = network_for_analysis(j);
  if (net.generator.empty()) throw ConfigError("network.generator: at least one layer required");
  const std::size_t z = zsize.value_or(net.latent_spatial);
  const auto ext = net.generator_extents(z);
  for (std::size_t i = 1; i < ext.size(); ++i)
    if (ext[i] <= 0) throw DimensionError("generator layer " + std::to_string(i - 1) + " collapses its input");

  std::vector<fs::path> outputs;
  auto emit_map = [&](const std::string& stem, const density::InfoDensityMap& m) {
    if (!out_dir) return;
    const fs::path p = *out_dir / (stem + (format == "pgm" ? ".pgm" : ".csv"));
    io::write_file(p, format == "pgm" ? io::density_pgm(m) : io::density_csv(m));
    outputs.push_back(p);
  };

  bool all_uniform = true;
  for (std::size_t i = 0; i < net.generator.size(); ++i) {
    const auto& l = net.generator[i];
    const auto r = density::check_rules(l);
    const auto m = density::density_map_1layer(static_cast<std::size_t>(ext[i]), l, 2);
    all_uniform = all_uniform && r.diagnosis == density::Diagnosis::uniform;
    ctx.out << json_line({{"layer", i},
                          {"k", l.k},
                          {"s", l.s},
                          {"p", l.p},
                          {"rule1_ok", r.rule1_ok},
                          {"rule2_ok", r.rule2_ok},
                          {"rule3_ok", r.rule3_ok},
                          {"diagnosis", density::to_string(r.diagnosis)},
                          {"input_extent", ext[i]},
                          {"output_extent", ext[i + 1]},
                          {"density_min", m.min()},
                          {"density_max", m.max()}});
    emit_map("layer" + std::to_string(i), m);
  }
  const auto chain = density::density_map_chain(z, net.generator, 2);
  emit_map("chain", chain);
  ctx.out << json_line({{"chain", true},
                        {"layers", net.generator.size()},
                        {"all_layers_uniform", all_uniform},
                        {"latent_extent", z},
                        {"output_extent", ext.back()},
                        {"periodicity", density::kernel_periodicity(net.generator)},
                        {"density_min", chain.min()},
                        {"density_max", chain.max()},
                        {"note", density::kResizeConvolutionNote}});
  if (out_dir)
    write_manifest(ctx, *out_dir / "manifest.json", "analyze",
                   {{"config", config_path.generic_string()}, {"network", to_json(net)}, {"zsize", z},
                    {"format", format}},
                   ctx.global.seed.value_or(0), outputs);
  return 0;
}

// ---------------------------------------------------------------------------
// train

inline TrainingSet load_training_set(const RunConfig& cfg) {
  if (cfg.training_images.empty()) throw ConfigError("training_images: at least one image required");
  TrainingSet data;
  for (const auto& p : cfg.training_images) data.images.push_back(io::read_micrograph(p, cfg.network.n_phases));
  data.axis_image = cfg.axis_image;
  data.isotropic = !cfg.anisotropic;
  data.validate();
  return data;
}

/// Reads a run configuration file and applies global overrides. The returned
/// configuration is validated.
inline RunConfig load_run_config(const fs::path& path, const GlobalOptions& g, const std::optional<fs::path>& out_dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.generic_string() + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  if (g.seed) j["seed"] = *g.seed;
  if (g.threads) j["threads"] = *g.threads;
  if (g.precision) j["precision"] = *g.precision;
  if (out_dir) j["output_dir"] = out_dir->generic_string();
  return run_config_from_json(j, path.parent_path());
}

struct TrainArtifacts {
  fs::path config, metrics, checkpoint, volume, manifest;
};

inline TrainArtifacts train_artifacts(const fs::path& dir) {
  return {dir / "config.json", dir / "metrics.csv", dir / "checkpoint.ckpt", dir / ("generated" + std::string(kVolumeExtension)),
          dir / "manifest.json"};
}

template <class T>
int run_train_typed(Context& ctx, const RunConfig& cfg, std::size_t log_every) {
  const auto effective = to_json(cfg);
  // Checkpoints carry the configuration minus the output location, so equal
  // runs give equal bytes wherever they are written.
  auto ckpt_meta = effective;
  ckpt_meta.erase("output_dir");
  const auto files = train_artifacts(cfg.output_dir);
  const auto data = load_training_set(cfg);
  io::write_file(files.config, effective.dump(2) + "\n");

  auto st = GanState<T>::init(cfg.network, cfg.train.n_discriminators(), cfg.seed);
  io::write_file(files.metrics, metrics_csv_header());
  std::ofstream log(files.metrics, std::ios::app | std::ios::binary);
  if (!log) throw IoError("cannot append to " + files.metrics.generic_string());
  while (st.step < cfg.train.steps) {
    const auto m = train_step(st, data, cfg.train);
    log << metrics_csv_row(m) << std::flush;
    if (log_every && (m.step % log_every == 0 || m.step == cfg.train.steps))
      ctx.err << json_line({{"step", m.step}, {"d_loss", m.d_loss}, {"g_loss", m.g_loss},
                            {"wasserstein_estimate", m.wasserstein}, {"wall_ms", m.wall_ms}});
    if (cfg.checkpoint_every && m.step % cfg.checkpoint_every == 0 && m.step != cfg.train.steps)
      save_checkpoint(files.checkpoint, st, ckpt_meta);
  }
  log.close();
  save_checkpoint(files.checkpoint, st, ckpt_meta);
  const auto volume = decode_phases(generate(st.generator, cfg.generate_z, cfg.seed));
  io::write_volume(files.volume, volume);
  write_manifest(ctx, files.manifest, "train", effective, cfg.seed, {files.config, files.checkpoint, files.volume});
  ctx.out << json_line({{"steps", st.step},
                        {"output_dir", cfg.output_dir.generic_string()},
                        {"checkpoint", files.checkpoint.generic_string()},
                        {"volume", files.volume.generic_string()},
                        {"volume_fraction", metrics::volume_fraction(volume)}});
  return 0;
}

inline int run_train(Context& ctx, const fs::path& config_path, const std::optional<fs::path>& out_dir,
                     std::size_t log_every) {
  const auto cfg = load_run_config(config_path, ctx.global, out_dir);
  set_num_threads(cfg.threads);
  return cfg.precision == "f32" ? run_train_typed<float>(ctx, cfg, log_every)
                                : run_train_typed<double>(ctx, cfg, log_every);
}

// ---------------------------------------------------------------------------
// generate

inline int run_generate(Context& ctx, const std::optional<fs::path>& checkpoint, std::size_t zsize,
                        const std::optional<fs::path>& out, bool probabilities) {
  if (!checkpoint) throw UsageError("generate requires --checkpoint <path>");
  if (!out) throw UsageError("generate requires --out <volume file>");
  const auto bytes = io::read_file(*checkpoint);
  const auto header = checkpoint_header(bytes);
  const std::string precision = ctx.global.precision.value_or(header.at("precision").get<std::string>());
  const std::uint64_t seed = ctx.global.seed.value_or(0);
  PhaseVolume v = precision == "f32" ? generate(parse_checkpoint<float>(bytes).generator, zsize, seed)
                                     : generate(parse_checkpoint<double>(bytes).generator, zsize, seed);
  if (!probabilities) v = decode_phases(v);
  io::write_volume(*out, v);
  write_manifest(ctx, fs::path(out->generic_string() + ".manifest.json"), "generate",
                 {{"checkpoint", checkpoint->generic_string()},
                  {"checkpoint_fnv1a64", hex64(fnv1a64(bytes.data(), bytes.size()))},
                  {"zsize", zsize},
                  {"seed", seed},
                  {"precision", precision},
                  {"probabilities", probabilities},
                  {"out", out->generic_string()}},
                 seed, {*out});
  ctx.out << json_line({{"volume", out->generic_string()}, {"extents", {v.depth, v.height, v.width}}});
  return 0;
}

// ---------------------------------------------------------------------------
// metrics and compare

inline PhaseVolume load_labels(const fs::path& p) {
  auto v = io::read_volume(p);
  return v.has_labels() ? v : decode_phases(v);
}

inline ojson report_json(const PhaseVolume& v, const metrics::MetricsReport& r) {
  ojson j;
  j["extents"] = {v.depth, v.height, v.width};
  j["n_phases"] = v.n_phases;
  j["volume_fraction"] = r.volume_fraction;
  if (r.tpb_density) j["tpb_density"] = *r.tpb_density;
  else j["tpb_density"] = nullptr;
  j["transport_phase"] = r.transport_phase;
  j["direction"] = to_string(r.direction);
  j["relative_diffusivity"] = r.d_rel;
  ojson s2 = ojson::array();
  for (const auto& p : r.s2[r.transport_phase]) s2.push_back({{"r", p.r}, {"value", p.value}});
  j["s2"] = s2;
  return j;
}

inline std::string s2_csv(const std::vector<metrics::S2Point>& s2) {
  std::string out = "r,value\n";
  char buf[64];
  for (const auto& p : s2) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", p.r, p.value);
    out += buf;
  }
  return out;
}

inline metrics::ReportOptions report_options(std::optional<std::size_t> phase, const std::string& direction,
                                             std::size_t s2_r_max, bool corners, std::size_t max_iterations) {
  metrics::ReportOptions o;
  o.phase = phase;
  o.direction = parse_axis(direction);
  o.s2_r_max = s2_r_max;
  o.tpb_corners = corners;
  o.diffusion.max_iterations = max_iterations;
  return o;
}

inline int run_metrics(Context& ctx, const std::vector<fs::path>& inputs, const std::optional<fs::path>& out,
                       const metrics::ReportOptions& opt) {
  if (inputs.empty()) throw UsageError("metrics requires --in <volume file(s)>");
  if (!out) throw UsageError("metrics requires --out <report.json>");
  ojson reports = ojson::array();
  std::vector<fs::path> outputs{*out};
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto v = load_labels(inputs[i]);
    if (opt.phase && *opt.phase >= v.n_phases)
      throw UsageError("--phase " + std::to_string(*opt.phase) + " outside [0, " + std::to_string(v.n_phases) + ")");
    const auto r = metrics::report(v, opt);
    reports.push_back(report_json(v, r));
    fs::path csv = *out;
    csv.replace_extension(inputs.size() == 1 ? ".s2.csv" : ".s2." + std::to_string(i) + ".csv");
    io::write_file(csv, s2_csv(r.s2[r.transport_phase]));
    outputs.push_back(csv);
  }
  const ojson doc = inputs.size() == 1 ? reports[0] : reports;
  io::write_file(*out, doc.dump(2) + "\n");
  ojson cfg{{"in", ojson::array()},
            {"phase", opt.phase ? ojson(*opt.phase) : ojson(nullptr)},
            {"direction", to_string(opt.direction)},
            {"s2_r_max", opt.s2_r_max},
            {"tpb_corners", opt.tpb_corners},
            {"max_iterations", opt.diffusion.max_iterations},
            {"out", out->generic_string()}};
  for (const auto& p : inputs) cfg["in"].push_back(p.generic_string());
  write_manifest(ctx, fs::path(out->generic_string() + ".manifest.json"), "metrics", cfg, ctx.global.seed.value_or(0),
                 outputs);
  ctx.out << json_line({{"report", out->generic_string()}, {"volumes", inputs.size()}});
  return 0;
}

/// Volume files directly inside `dir`, sorted by name.
inline std::vector<fs::path> volume_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError(dir.generic_string() + " is not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == kVolumeExtension) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw DataError("no " + std::string(kVolumeExtension) + " files in " + dir.generic_string());
  return out;
}

inline std::string summary_csv(const std::vector<metrics::MetricSummary>& s) {
  std::string out = "metric,set,n,min,whisker_low,q1,median,mean,q3,whisker_high,max,outliers\n";
  char buf[512];
  for (const auto& m : s)
    for (const auto& [name, b] : {std::pair{"real", &m.real}, std::pair{"fake", &m.fake}}) {
      std::snprintf(buf, sizeof buf, "%s,%s,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%zu\n", m.metric.c_str(),
                    name, b->n, b->min, b->whisker_low, b->q1, b->median, b->mean, b->q3, b->whisker_high, b->max,
                    b->outliers.size());
      out += buf;
    }
  return out;
}

inline int run_compare(Context& ctx, const std::optional<fs::path>& real_dir, const std::optional<fs::path>& fake_dir,
                       const std::optional<fs::path>& out, metrics::ReportOptions opt) {
  if (!real_dir || !fake_dir) throw UsageError("compare requires --real <dir> and --fake <dir>");
  if (!out) throw UsageError("compare requires --out <summary.csv>");
  std::vector<PhaseVolume> real, fake;
  ojson cfg{{"real", ojson::array()}, {"fake", ojson::array()}};
  for (const auto& p : volume_files(*real_dir)) {
    real.push_back(load_labels(p));
    cfg["real"].push_back(p.generic_string());
  }
  for (const auto& p : volume_files(*fake_dir)) {
    fake.push_back(load_labels(p));
    cfg["fake"].push_back(p.generic_string());
  }
  const auto s = metrics::compare_datasets(real, fake, opt);
  io::write_file(*out, summary_csv(s));
  cfg["phase"] = opt.phase ? ojson(*opt.phase) : ojson(nullptr);
  cfg["direction"] = to_string(opt.direction);
  cfg["tpb_corners"] = opt.tpb_corners;
  cfg["out"] = out->generic_string();
  write_manifest(ctx, fs::path(out->generic_string() + ".manifest.json"), "compare", cfg, ctx.global.seed.value_or(0),
                 {*out});
  ctx.out << json_line({{"summary", out->generic_string()}, {"real", real.size()}, {"fake", fake.size()}});
  return 0;
}

// ---------------------------------------------------------------------------
// dispatch

inline int report_error(std::ostream& err, const std::string& category, const std::string& message) {
  err << json_line({{"error", category}, {"message", message}});
  return exit_code_for(category);
}

/// Parses `args` (args[0] is the program name), runs one subcommand and
/// returns the process exit code.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Context ctx{{}, args, out, err};
  CLI::App app{"volsynth: 3-D microstructure synthesis from 2-D micrographs"};
  app.name("volsynth");
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", kVersion);

  std::size_t threads = 1;
  std::uint64_t seed = 0;
  std::string precision = "f64";
  std::string manifest;
  auto* threads_opt = app.add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  auto* seed_opt = app.add_option("--seed", seed, "Random seed");
  auto* precision_opt =
      app.add_option("--precision", precision, "Floating-point precision")->check(CLI::IsMember({"f32", "f64"}));
  auto* manifest_opt = app.add_option("--manifest", manifest, "Manifest path (overrides the default location)");

  std::vector<std::string> ingest_files;
  bool ingest_check = false;
  std::size_t ingest_phases = 0;
  auto* ingest = app.add_subcommand("ingest", "Validate micrographs or volumes and print phase histograms");
  ingest->add_flag("--check", ingest_check, "Validate inputs and print histograms")->required();
  ingest->add_option("files", ingest_files, "PGM micrographs or volume files")->required();
  ingest->add_option("--phases", ingest_phases, "Number of phases (default: largest label + 1)");

  std::string analyze_config, analyze_out, analyze_format = "csv";
  std::size_t analyze_z = 0;
  auto* analyze = app.add_subcommand("analyze", "Check generator layers against the uniform-density rules");
  analyze->add_option("--config", analyze_config, "Network or run configuration (JSON)")->required();
  auto* analyze_z_opt = analyze->add_option("--zsize", analyze_z, "Latent spatial extent")->check(CLI::PositiveNumber);
  auto* analyze_out_opt = analyze->add_option("--out", analyze_out, "Directory for density maps");
  analyze->add_option("--format", analyze_format, "Density map format")->check(CLI::IsMember({"csv", "pgm"}));

  std::string train_config, train_out;
  std::size_t train_log_every = 0;
  auto* train = app.add_subcommand("train", "Train a generator from a run configuration");
  train->add_option("--config", train_config, "Run configuration (JSON)")->required();
  auto* train_out_opt = train->add_option("--out", train_out, "Output directory (overrides output_dir)");
  train->add_option("--log-every", train_log_every, "Print progress to stderr every N steps (0: off)");

  std::string gen_ckpt, gen_out;
  std::size_t gen_z = 4;
  bool gen_probs = false;
  auto* gen = app.add_subcommand("generate", "Generate a volume from a checkpoint");
  auto* gen_ckpt_opt = gen->add_option("--checkpoint", gen_ckpt, "Checkpoint file");
  gen->add_option("--zsize", gen_z, "Latent spatial extent")->check(CLI::PositiveNumber);
  auto* gen_out_opt = gen->add_option("--out", gen_out, "Output volume file");
  gen->add_flag("--probabilities", gen_probs, "Store phase probabilities instead of labels");

  std::vector<std::string> met_in;
  std::string met_out, direction = "z";
  std::size_t phase = 0, s2_r_max = 16, max_iterations = 200000;
  bool corners = false;
  auto* met = app.add_subcommand("metrics", "Volume fraction, two-point correlation, TPB density and diffusivity");
  met->add_option("--in", met_in, "Volume file(s)");
  auto* met_phase_opt = met->add_option("--phase", phase, "Transport phase (default: majority phase)");
  auto* met_out_opt = met->add_option("--out", met_out, "Report path (JSON)");
  met->add_option("--direction", direction, "Diffusion direction")->check(CLI::IsMember({"z", "y", "x"}));
  met->add_option("--s2-rmax", s2_r_max, "Largest two-point correlation lag");
  met->add_flag("--tpb-corners", corners, "Count TPB at lattice vertices instead of edges");
  met->add_option("--max-iterations", max_iterations, "Diffusion solver iteration cap")->check(CLI::PositiveNumber);

  std::string cmp_real, cmp_fake, cmp_out, cmp_direction = "z";
  std::size_t cmp_phase = 0;
  bool cmp_corners = false;
  auto* cmp = app.add_subcommand("compare", "Summarise metric distributions of real and generated volumes");
  auto* cmp_real_opt = cmp->add_option("--real", cmp_real, "Directory of real volumes");
  auto* cmp_fake_opt = cmp->add_option("--fake", cmp_fake, "Directory of generated volumes");
  auto* cmp_out_opt = cmp->add_option("--out", cmp_out, "Summary path (CSV)");
  auto* cmp_phase_opt = cmp->add_option("--phase", cmp_phase, "Transport phase (default: majority phase of the first real volume)");
  cmp->add_option("--direction", cmp_direction, "Diffusion direction")->check(CLI::IsMember({"z", "y", "x"}));
  cmp->add_flag("--tpb-corners", cmp_corners, "Count TPB at lattice vertices instead of edges");

  try {
    // CLI11 consumes a reversed argument list without the program name.
    std::vector<std::string> rev(args.begin() + (args.empty() ? 0 : 1), args.end());
    std::reverse(rev.begin(), rev.end());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    return report_error(err, "usage", e.what());
  }

  auto opt_path = [](CLI::Option* o, const std::string& v) {
    return o->count() ? std::optional<fs::path>(v) : std::nullopt;
  };
  if (threads_opt->count()) ctx.global.threads = threads;
  if (seed_opt->count()) ctx.global.seed = seed;
  if (precision_opt->count()) ctx.global.precision = precision;
  if (manifest_opt->count()) ctx.global.manifest = manifest;
  set_num_threads(ctx.global.threads.value_or(1));

  try {
    if (*ingest) {
      std::vector<fs::path> files(ingest_files.begin(), ingest_files.end());
      return run_ingest(ctx, files, ingest_phases);
    }
    if (*analyze)
      return run_analyze(ctx, analyze_config, analyze_z_opt->count() ? std::optional(analyze_z) : std::nullopt,
                         opt_path(analyze_out_opt, analyze_out), analyze_format);
    if (*train) return run_train(ctx, train_config, opt_path(train_out_opt, train_out), train_log_every);
    if (*gen) return run_generate(ctx, opt_path(gen_ckpt_opt, gen_ckpt), gen_z, opt_path(gen_out_opt, gen_out), gen_probs);
    if (*met) {
      std::vector<fs::path> in(met_in.begin(), met_in.end());
      return run_metrics(ctx, in, opt_path(met_out_opt, met_out),
                         report_options(met_phase_opt->count() ? std::optional(phase) : std::nullopt, direction,
                                        s2_r_max, corners, max_iterations));
    }
    if (*cmp)
      return run_compare(ctx, opt_path(cmp_real_opt, cmp_real), opt_path(cmp_fake_opt, cmp_fake),
                         opt_path(cmp_out_opt, cmp_out),
                         report_options(cmp_phase_opt->count() ? std::optional(cmp_phase) : std::nullopt,
                                        cmp_direction, 16, cmp_corners, 200000));
  } catch (const Error& e) {
    return report_error(err, e.category(), e.what());
  } catch (const std::exception& e) {
    return report_error(err, "internal", e.what());
  }
  return report_error(err, "usage", "no subcommand given");
}

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return dispatch(std::vector<std::string>(argv, argv + argc), out, err);
}

}  // namespace volsynth::cli
