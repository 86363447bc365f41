#include "defreg/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "defreg/rng.hpp"

namespace defreg {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

LogLevel g_log_level = LogLevel::info;

const char* level_name(LogLevel level) {
  switch (level) {
    case LogLevel::debug: return "debug";
    case LogLevel::info: return "info";
    case LogLevel::warn: return "warn";
    default: return "error";
  }
}

void check_keys(const json& j, std::initializer_list<std::string_view> allowed,
                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& item : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end())
      throw ConfigError(where + ": unknown key '" + item.key() + "'");
  }
}

ChallengeSpec parse_challenge(const json& j) {
  check_keys(j, {"deformation_level", "noise_sigma", "outlier_fraction", "overlap_ratio",
                 "rotation_max"},
             "challenge");
  ChallengeSpec spec;
  if (j.contains("deformation_level")) j.at("deformation_level").get_to(spec.deformation_level);
  if (j.contains("noise_sigma")) j.at("noise_sigma").get_to(spec.noise_sigma);
  if (j.contains("outlier_fraction")) j.at("outlier_fraction").get_to(spec.outlier_fraction);
  if (j.contains("overlap_ratio")) j.at("overlap_ratio").get_to(spec.overlap_ratio);
  if (j.contains("rotation_max")) j.at("rotation_max").get_to(spec.rotation_max);
  return spec;
}

SolverConfig parse_solver(const json& j) {
  check_keys(j, {"k_cand", "k_reg", "alpha", "lbp_iterations", "softmax_temperature",
                 "softmin_temperature"},
             "solver");
  SolverConfig cfg = j.get<SolverConfig>();
  cfg.validate();
  return cfg;
}

DescriptorConfig parse_descriptor(const json& j) {
  check_keys(j, {"k_edge", "edge_widths", "align_conv_widths", "align_fc_widths", "heads", "d_ff"},
             "descriptor");
  DescriptorConfig cfg = j.get<DescriptorConfig>();
  cfg.validate();
  return cfg;
}

TrainConfig parse_train(const json& j) {
  check_keys(j,
             {"epochs", "learning_rate", "batch_size", "seed", "normalization", "loss", "optimizer",
              "descriptor", "solver", "checkpoint_every", "checkpoint_dir"},
             "train");
  if (j.contains("descriptor")) parse_descriptor(j.at("descriptor"));
  if (j.contains("solver")) parse_solver(j.at("solver"));
  TrainConfig cfg = j.get<TrainConfig>();
  cfg.validate();
  return cfg;
}

fs::path out_dir(const json& config, const CliOverrides& overrides) {
  if (overrides.out) return *overrides.out;
  if (!config.contains("out")) throw ConfigError("missing output path (config 'out' or --out)");
  return fs::path(config.at("out").get<std::string>());
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << text;
  if (!out.good()) throw IoError("write failed: " + path.string());
}

void write_json_file(const fs::path& path, const json& doc) {
  write_text_file(path, doc.dump(2) + "\n");
}

std::string fmt_double(double v) { return json(v).dump(); }

struct SweepConfig {
  std::string primitive = "sphere";
  int points = 512;
  std::string axis = "deformation";
  std::vector<double> values;
  int seeds = 1;
  std::uint64_t seed = 0;
  ChallengeSpec base;
};

SweepConfig parse_sweep(const json& config, const CliOverrides& overrides) {
  SweepConfig sweep;
  if (config.contains("primitive")) config.at("primitive").get_to(sweep.primitive);
  if (config.contains("points")) config.at("points").get_to(sweep.points);
  if (config.contains("axis")) config.at("axis").get_to(sweep.axis);
  if (config.contains("seeds")) config.at("seeds").get_to(sweep.seeds);
  if (config.contains("seed")) config.at("seed").get_to(sweep.seed);
  if (config.contains("challenge")) sweep.base = parse_challenge(config.at("challenge"));
  if (overrides.seed) sweep.seed = *overrides.seed;

  if (!config.contains("values")) throw ConfigError("sweep requires 'values'");
  config.at("values").get_to(sweep.values);
  if (sweep.values.empty()) throw ConfigError("sweep 'values' must be non-empty");
  if (sweep.points < 4) throw ConfigError("sweep 'points' must be at least 4");
  if (sweep.seeds < 1) throw ConfigError("sweep 'seeds' must be positive");
  static const std::vector<std::string> axes = {"deformation", "noise", "outliers", "overlap"};
  if (std::find(axes.begin(), axes.end(), sweep.axis) == axes.end())
    throw ConfigError("unknown sweep axis '" + sweep.axis + "'");
  return sweep;
}

std::string bundle_name(const std::string& axis, double value, int seed_index) {
  return axis + "-" + fmt_double(value) + "-seed-" + std::to_string(seed_index);
}

DescriptorParams load_checkpoint(const json& config) {
  if (!config.contains("params")) throw ConfigError("missing 'params' checkpoint path");
  DescriptorParams params = load_params(fs::path(config.at("params").get<std::string>()));
  if (config.contains("descriptor")) {
    const DescriptorConfig expected = parse_descriptor(config.at("descriptor"));
    if (expected.d_model() != params.cfg.d_model())
      throw CompatibilityError("checkpoint d_model " + std::to_string(params.cfg.d_model()) +
                               " does not match config d_model " +
                               std::to_string(expected.d_model()));
  }
  return params;
}

SolverConfig solver_from(const json& config) {
  return config.contains("solver") ? parse_solver(config.at("solver")) : SolverConfig{};
}

std::string normalization_from(const json& config) {
  std::string mode = "unit-diagonal";
  if (config.contains("normalization")) config.at("normalization").get_to(mode);
  if (mode != "unit-diagonal" && mode != "none")
    throw ConfigError("normalization must be 'unit-diagonal' or 'none'");
  return mode;
}

json pair_metrics_json(const PairEval& eval) {
  return json{{"initial_mean_distance", eval.initial_mean_distance},
              {"registered_mean_distance", eval.registered_mean_distance},
              {"chamfer_initial", eval.chamfer_initial},
              {"chamfer_registered", eval.chamfer_registered}};
}

}  // namespace

void set_log_level(const std::string& level) {
  if (level == "debug") g_log_level = LogLevel::debug;
  else if (level == "info") g_log_level = LogLevel::info;
  else if (level == "warn") g_log_level = LogLevel::warn;
  else if (level == "error") g_log_level = LogLevel::error;
  else throw ConfigError("unknown log level '" + level + "'");
}

void log_line(LogLevel level, const std::string& msg) {
  if (static_cast<int>(level) < static_cast<int>(g_log_level)) return;
  std::cerr << "[" << level_name(level) << "] " << msg << "\n";
}

json load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config: " + path.string());
  json config;
  try {
    config = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (!config.is_object()) throw ConfigError(path.string() + ": config must be a JSON object");
  if (!config.contains("schema_version"))
    throw ConfigError(path.string() + ": missing schema_version");
  if (config.at("schema_version").get<int>() != kSchemaVersion)
    throw ConfigError(path.string() + ": unsupported schema_version");
  return config;
}

std::vector<DatasetEntry> load_dataset(const fs::path& path) {
  std::vector<DatasetEntry> entries;
  auto load_one = [&](const fs::path& dir, const std::string& name) {
    DatasetEntry e;
    e.name = name;
    e.pair = read_bundle(dir, &e.meta);
    entries.push_back(std::move(e));
  };

  if (fs::is_directory(path) && fs::exists(path / "source.xyz")) {
    load_one(path, path.filename().string());
    return entries;
  }
  if (fs::is_regular_file(path) && path.filename() == "manifest.json") {
    json manifest;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open manifest: " + path.string());
    try {
      manifest = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
    if (!manifest.contains("bundles") || !manifest.at("bundles").is_array())
      throw FormatError(path.string() + ": manifest has no bundle list");
    for (const auto& entry : manifest.at("bundles")) {
      const auto rel = entry.at("path").get<std::string>();
      load_one(path.parent_path() / rel, rel);
    }
    return entries;
  }
  if (fs::is_directory(path)) {
    if (fs::exists(path / "manifest.json")) return load_dataset(path / "manifest.json");
    std::vector<fs::path> dirs;
    for (const auto& child : fs::directory_iterator(path))
      if (child.is_directory() && fs::exists(child.path() / "source.xyz")) dirs.push_back(child.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& dir : dirs) load_one(dir, dir.filename().string());
    if (entries.empty()) throw ConfigError("no bundles found under " + path.string());
    return entries;
  }
  throw ConfigError("dataset path is neither a bundle, a manifest, nor a directory: " +
                    path.string());
}

RegistrationPair make_sweep_pair(const std::string& primitive, int points,
                                 const ChallengeSpec& base, const std::string& axis, double value,
                                 std::uint64_t sweep_seed, int seed_index) {
  ChallengeSpec spec = base;
  if (axis == "deformation") spec.deformation_level = value;
  else if (axis == "noise") spec.noise_sigma = value;
  else if (axis == "outliers") spec.outlier_fraction = value;
  else if (axis == "overlap") spec.overlap_ratio = value;
  else throw ConfigError("unknown sweep axis '" + axis + "'");

  const auto si = static_cast<std::uint64_t>(seed_index);
  spec.seed = mix_seed(sweep_seed, 1 + si);
  spec.validate();
  const PointCloud source = sample_primitive(primitive, points, mix_seed(sweep_seed, 777000 + si));
  return make_pair(source, spec);
}

void cmd_gen(const json& config, const CliOverrides& overrides) {
  check_keys(config,
             {"schema_version", "primitive", "points", "axis", "values", "seeds", "seed",
              "challenge", "out"},
             "gen config");
  const SweepConfig sweep = parse_sweep(config, overrides);
  const fs::path out = out_dir(config, overrides);

  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());

  json bundles = json::array();
  for (std::size_t vi = 0; vi < sweep.values.size(); ++vi) {
    for (int si = 0; si < sweep.seeds; ++si) {
      const double value = sweep.values[vi];
      const RegistrationPair pair =
          make_sweep_pair(sweep.primitive, sweep.points, sweep.base, sweep.axis, value,
                          sweep.seed, si);
      const std::string name = bundle_name(sweep.axis, value, si);
      BundleMeta meta;
      if (pair.spec.overlap_ratio < 1.0) meta.overlap = pair.spec.overlap_ratio;
      write_bundle(pair, out / name, meta);
      bundles.push_back(json{{"path", name}, {"axis_value", value}, {"seed_index", si}});
    }
  }
  json manifest{{"schema_version", kSchemaVersion},
                {"axis", sweep.axis},
                {"primitive", sweep.primitive},
                {"points", sweep.points},
                {"seed", sweep.seed},
                {"bundles", bundles}};
  write_json_file(out / "manifest.json", manifest);
  log_line(LogLevel::info,
           "wrote " + std::to_string(bundles.size()) + " bundles to " + out.string());
}

void cmd_train(const json& config, const CliOverrides& overrides) {
  check_keys(config, {"schema_version", "data", "train", "out"}, "train config");
  if (!config.contains("data")) throw ConfigError("train config requires 'data'");
  if (!config.contains("train")) throw ConfigError("train config requires 'train'");
  TrainConfig cfg = parse_train(config.at("train"));
  if (overrides.seed) cfg.seed = *overrides.seed;
  const fs::path out = out_dir(config, overrides);

  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  if (cfg.checkpoint_every > 0 && cfg.checkpoint_dir.empty()) cfg.checkpoint_dir = out / "checkpoints";

  std::vector<RegistrationPair> dataset;
  for (auto& entry : load_dataset(fs::path(config.at("data").get<std::string>())))
    dataset.push_back(std::move(entry.pair));
  log_line(LogLevel::info, "training on " + std::to_string(dataset.size()) + " pairs");

  const auto [params, report] = train(dataset, cfg);
  save_params(params, out / "params.json");

  json report_json{{"schema_version", kSchemaVersion},
                   {"config_hash", report.config_hash},
                   {"wall_seconds", report.wall_seconds},
                   {"epoch_loss", report.epoch_loss},
                   {"epoch_val_mean_distance", report.epoch_val_mean_distance}};
  write_json_file(out / "report.json", report_json);

  std::string csv = "epoch,loss,val_mean_distance\n";
  for (std::size_t e = 0; e < report.epoch_loss.size(); ++e)
    csv += std::to_string(e) + "," + fmt_double(report.epoch_loss[e]) + "," +
           fmt_double(report.epoch_val_mean_distance[e]) + "\n";
  write_text_file(out / "loss_curve.csv", csv);
  log_line(LogLevel::info, "trained " + std::to_string(report.epoch_loss.size()) + " epochs, hash " +
                               report.config_hash);
}

void cmd_register(const json& config, const CliOverrides& overrides) {
  check_keys(config,
             {"schema_version", "params", "data", "out", "solver", "normalization", "descriptor"},
             "register config");
  if (!config.contains("data")) throw ConfigError("register config requires 'data'");
  const DescriptorParams params = load_checkpoint(config);
  const SolverConfig solver_cfg = solver_from(config);
  const std::string normalization = normalization_from(config);
  const fs::path out = out_dir(config, overrides);

  for (const auto& entry : load_dataset(fs::path(config.at("data").get<std::string>()))) {
    const fs::path pair_dir = out / entry.name;
    std::error_code ec;
    fs::create_directories(pair_dir, ec);
    if (ec) throw IoError("cannot create " + pair_dir.string() + ": " + ec.message());

    const PairEval eval = evaluate_pair(params, entry.pair, solver_cfg, normalization);
    PointCloud registered = entry.pair.source;
    registered.points += eval.field.displacements;
    write_xyz(registered.points, pair_dir / "registered.xyz");
    write_json_file(pair_dir / "metrics.json", pair_metrics_json(eval));

    // Error channel: distance to the ground-truth correspondent where one
    // exists, nearest target point otherwise.
    const Eigen::Index n = registered.size();
    Eigen::VectorXd error(n);
    std::vector<int> gt(static_cast<std::size_t>(n), -1);
    for (Eigen::Index r = 0; r < entry.pair.correspondences.size(); ++r)
      gt[static_cast<std::size_t>(entry.pair.correspondences.pairs(r, 0))] =
          entry.pair.correspondences.pairs(r, 1);
    const Eigen::MatrixXi nearest = knn_indices(registered.points, entry.pair.target.points, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int t = gt[static_cast<std::size_t>(i)] >= 0 ? gt[static_cast<std::size_t>(i)]
                                                         : nearest(i, 0);
      error[i] = (registered.points.row(i) - entry.pair.target.points.row(t)).norm();
    }
    registered.attributes["error"] = error;
    export_colorized(registered, "error", pair_dir / "error.ply");
    log_line(LogLevel::info, entry.name + ": registered mean distance " +
                                 fmt_double(eval.registered_mean_distance));
  }
}

void cmd_eval(const json& config, const CliOverrides& overrides) {
  check_keys(config,
             {"schema_version", "params", "data", "out", "solver", "normalization", "descriptor"},
             "eval config");
  if (!config.contains("data")) throw ConfigError("eval config requires 'data'");
  const DescriptorParams params = load_checkpoint(config);
  const SolverConfig solver_cfg = solver_from(config);
  const std::string normalization = normalization_from(config);
  const fs::path out = out_dir(config, overrides);

  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());

  const auto entries = load_dataset(fs::path(config.at("data").get<std::string>()));
  std::vector<RegistrationPair> dataset;
  for (const auto& entry : entries) dataset.push_back(entry.pair);
  const EvalMetrics metrics = validate(params, dataset, solver_cfg, normalization);

  json per_pair = json::array();
  std::string csv =
      "pair,initial_mean_distance,registered_mean_distance,chamfer_initial,chamfer_registered\n";
  for (std::size_t i = 0; i < entries.size(); ++i) {
    json row = pair_metrics_json(metrics.per_pair[i]);
    row["pair"] = entries[i].name;
    per_pair.push_back(row);
    csv += entries[i].name + "," + fmt_double(metrics.per_pair[i].initial_mean_distance) + "," +
           fmt_double(metrics.per_pair[i].registered_mean_distance) + "," +
           fmt_double(metrics.per_pair[i].chamfer_initial) + "," +
           fmt_double(metrics.per_pair[i].chamfer_registered) + "\n";
  }
  json doc{{"schema_version", kSchemaVersion},
           {"mean_initial", metrics.mean_initial},
           {"mean_registered", metrics.mean_registered},
           {"median_registered", metrics.median_registered},
           {"mean_chamfer_registered", metrics.mean_chamfer_registered},
           {"pairs", per_pair}};
  write_json_file(out / "eval.json", doc);
  write_text_file(out / "eval.csv", csv);
  log_line(LogLevel::info, "mean registered distance " + fmt_double(metrics.mean_registered) +
                               " over " + std::to_string(entries.size()) + " pairs");
}

void cmd_bench(const json& config, const CliOverrides& overrides) {
  check_keys(config,
             {"schema_version", "params", "descriptor", "primitive", "points", "axis", "values",
              "seeds", "seed", "challenge", "solver", "normalization", "out"},
             "bench config");
  const SweepConfig sweep = parse_sweep(config, overrides);
  const SolverConfig solver_cfg = solver_from(config);
  const std::string normalization = normalization_from(config);
  const fs::path out = out_dir(config, overrides);

  DescriptorParams params = [&] {
    if (config.contains("params")) return load_checkpoint(config);
    DescriptorConfig dcfg;
    if (config.contains("descriptor")) dcfg = parse_descriptor(config.at("descriptor"));
    return DescriptorParams::init(dcfg, mix_seed(sweep.seed, 424242));
  }();

  std::vector<double> values = sweep.values;
  std::sort(values.begin(), values.end());

  json rows = json::array();
  std::string csv = "axis_value,initial_mean_distance,registered_mean_distance,pairs,runtime_seconds\n";
  for (const double value : values) {
    double initial_acc = 0.0, registered_acc = 0.0;
    double runtime = 0.0;
    for (int si = 0; si < sweep.seeds; ++si) {
      const RegistrationPair pair =
          make_sweep_pair(sweep.primitive, sweep.points, sweep.base, sweep.axis, value,
                          sweep.seed, si);
      initial_acc += corr_mean_distance(pair);
      const auto t0 = std::chrono::steady_clock::now();
      const PairEval eval = evaluate_pair(params, pair, solver_cfg, normalization);
      runtime += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      registered_acc += eval.registered_mean_distance;
    }
    const double initial = initial_acc / sweep.seeds;
    const double registered = registered_acc / sweep.seeds;
    rows.push_back(json{{"axis_value", value},
                        {"initial_mean_distance", initial},
                        {"registered_mean_distance", registered},
                        {"pairs", sweep.seeds},
                        {"runtime_seconds", runtime}});
    char runtime_buf[32];
    std::snprintf(runtime_buf, sizeof runtime_buf, "%.3f", runtime);
    csv += fmt_double(value) + "," + fmt_double(initial) + "," + fmt_double(registered) + "," +
           std::to_string(sweep.seeds) + "," + runtime_buf + "\n";
    log_line(LogLevel::info, sweep.axis + " " + fmt_double(value) + ": initial " +
                                 fmt_double(initial) + ", registered " + fmt_double(registered));
  }

  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  json report{{"schema_version", kSchemaVersion},
              {"axis", sweep.axis},
              {"config_hash", hash_hex(fnv1a64(config.dump()))},
              {"rows", rows}};
  write_json_file(out / "bench.json", report);
  write_text_file(out / "bench.csv", csv);
}

void cmd_ingest_4dmatch(const json& config, const CliOverrides& overrides) {
  check_keys(config, {"schema_version", "archive", "out"}, "ingest config");
  if (!config.contains("archive")) throw ConfigError("ingest config requires 'archive'");
  const fs::path out = out_dir(config, overrides);

  const auto records = read_4dmatch_archive(fs::path(config.at("archive").get<std::string>()));
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());

  json bundles = json::array();
  for (std::size_t r = 0; r < records.size(); ++r) {
    char name[32];
    std::snprintf(name, sizeof name, "record-%04zu", r);
    const RegistrationPair pair = pair_from_4dmatch(records[r]);
    BundleMeta meta;
    meta.provenance = "defreg-ingest-4dmatch";
    meta.overlap = records[r].overlap;
    meta.label = overlap_label(records[r].overlap);
    write_bundle(pair, out / name, meta);
    bundles.push_back(json{{"path", name}, {"overlap", records[r].overlap}, {"label", *meta.label}});
  }
  json manifest{{"schema_version", kSchemaVersion}, {"bundles", bundles}};
  write_json_file(out / "manifest.json", manifest);
  log_line(LogLevel::info,
           "ingested " + std::to_string(records.size()) + " records into " + out.string());
}

}  // namespace defreg
