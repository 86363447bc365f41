#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include "defreg/io.hpp"
#include "defreg/train.hpp"
#include "oracles.hpp"

using namespace defreg;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("defreg_train_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

DescriptorConfig tiny_descriptor() {
  DescriptorConfig cfg;
  cfg.k_edge = 4;
  cfg.edge_widths = {8, 8};
  cfg.align_conv_widths = {8, 16};
  cfg.align_fc_widths = {16, 8};
  cfg.heads = 2;
  cfg.d_ff = 12;
  return cfg;
}

SolverConfig tiny_solver() {
  SolverConfig cfg;
  cfg.k_cand = 4;
  cfg.k_reg = 3;
  cfg.lbp_iterations = 2;
  return cfg;
}

TrainConfig tiny_train(int epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 2;
  cfg.seed = 5;
  cfg.descriptor = tiny_descriptor();
  cfg.solver = tiny_solver();
  return cfg;
}

RegistrationPair deformed_pair(int n, std::uint64_t seed, double level = 0.15) {
  const PointCloud base = sample_primitive("sphere", n, seed);
  ChallengeSpec spec;
  spec.deformation_level = level;
  spec.seed = seed;
  return make_pair(base, spec);
}

bool same_tensors(const DescriptorParams& a, const DescriptorParams& b) {
  const auto ta = a.tensors(), tb = b.tensors();
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].name != tb[i].name || ta[i].size != tb[i].size) return false;
    for (Eigen::Index c = 0; c < ta[i].size; ++c)
      if (ta[i].data[c] != tb[i].data[c]) return false;
  }
  return true;
}

RegistrationPair scaled_copy(const RegistrationPair& pair, double s) {
  RegistrationPair out = pair;
  out.source.points *= s;
  out.target.points *= s;
  out.field_gt.displacements *= s;
  out.rigid.translation *= s;
  return out;
}

}  // namespace

TEST_CASE("loss is the mean squared correspondence residual") {
  SUBCASE("hand-built three-point pair matches scalar evaluation") {
    RegistrationPair pair;
    pair.source.points.resize(3, 3);
    pair.source.points << 0, 0, 0, 1, 0, 0, 0, 2, 0;
    pair.target.points.resize(3, 3);
    pair.target.points << 5, 0, 0, 0.5, 0.5, 0, 1, 2, 1;
    pair.correspondences.pairs.resize(3, 2);
    pair.correspondences.pairs << 0, 2, 1, 0, 2, 1;

    std::mt19937_64 rng(1);
    DeformationField field;
    field.displacements = oracle::random_mat(3, 3, rng);

    double acc = 0.0;
    for (int r = 0; r < 3; ++r) {
      const int s = pair.correspondences.pairs(r, 0), t = pair.correspondences.pairs(r, 1);
      for (int c = 0; c < 3; ++c) {
        const double d =
            pair.source.points(s, c) + field.displacements(s, c) - pair.target.points(t, c);
        acc += d * d;
      }
    }
    CHECK(loss(pair, field) == doctest::Approx(acc / 3.0).epsilon(1e-12));
  }

  SUBCASE("zero field reproduces the initial distances, exact field reaches zero") {
    const RegistrationPair pair = deformed_pair(40, 3);
    DeformationField zero;
    zero.displacements = RMat::Zero(pair.source.size(), 3);
    double expect = 0.0;
    for (Eigen::Index r = 0; r < pair.correspondences.size(); ++r) {
      const int s = pair.correspondences.pairs(r, 0), t = pair.correspondences.pairs(r, 1);
      expect += (pair.source.points.row(s) - pair.target.points.row(t)).squaredNorm();
    }
    expect /= static_cast<double>(pair.correspondences.size());
    CHECK(loss(pair, zero) == doctest::Approx(expect).epsilon(1e-12));

    DeformationField exact;
    exact.displacements = RMat::Zero(pair.source.size(), 3);
    for (Eigen::Index r = 0; r < pair.correspondences.size(); ++r) {
      const int s = pair.correspondences.pairs(r, 0), t = pair.correspondences.pairs(r, 1);
      exact.displacements.row(s) = pair.target.points.row(t) - pair.source.points.row(s);
    }
    CHECK(loss(pair, exact) < 1e-18);
  }

  SUBCASE("missing correspondences and misaligned fields are rejected") {
    RegistrationPair pair = deformed_pair(10, 4);
    DeformationField field;
    field.displacements = RMat::Zero(pair.source.size(), 3);
    pair.correspondences.pairs.resize(0, 2);
    CHECK_THROWS_AS(loss(pair, field), ConfigError);

    const RegistrationPair ok = deformed_pair(10, 4);
    field.displacements = RMat::Zero(ok.source.size() - 1, 3);
    CHECK_THROWS_AS(loss(ok, field), DimensionError);
  }
}

TEST_CASE("adam matches a scalar reference implementation") {
  std::mt19937_64 rng(9);
  RMat a = oracle::random_mat(2, 2, rng);
  RMat b = oracle::random_mat(1, 3, rng);
  RMat ga(2, 2), gb(1, 3);
  std::vector<double> ref = {a(0, 0), a(0, 1), a(1, 0), a(1, 1), b(0, 0), b(0, 1), b(0, 2)};
  std::vector<double> rm(7, 0.0), rv(7, 0.0);

  Adam adam;
  adam.lr = 0.01;
  const std::vector<TensorRef> params = {{"a", a.data(), 4}, {"b", b.data(), 3}};
  const std::vector<TensorRef> grads = {{"a", ga.data(), 4}, {"b", gb.data(), 3}};
  adam.init(params);

  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (int step = 1; step <= 5; ++step) {
    // fill in place: the TensorRefs above alias this exact storage
    for (Eigen::Index i = 0; i < 2; ++i)
      for (Eigen::Index j = 0; j < 2; ++j) ga(i, j) = dist(rng);
    for (Eigen::Index j = 0; j < 3; ++j) gb(0, j) = dist(rng);
    const std::vector<double> g = {ga(0, 0), ga(0, 1), ga(1, 0), ga(1, 1),
                                   gb(0, 0), gb(0, 1), gb(0, 2)};
    for (std::size_t i = 0; i < 7; ++i) {
      rm[i] = 0.9 * rm[i] + 0.1 * g[i];
      rv[i] = 0.999 * rv[i] + 0.001 * g[i] * g[i];
      const double mhat = rm[i] / (1.0 - std::pow(0.9, step));
      const double vhat = rv[i] / (1.0 - std::pow(0.999, step));
      ref[i] -= 0.01 * mhat / (std::sqrt(vhat) + 1e-8);
    }
    adam.step(params, grads);
    const std::vector<double> got = {a(0, 0), a(0, 1), a(1, 0), a(1, 1), b(0, 0), b(0, 1), b(0, 2)};
    for (std::size_t i = 0; i < 7; ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-14));
  }
  CHECK(adam.steps == 5);

  const std::vector<TensorRef> wrong = {{"a", a.data(), 4}};
  CHECK_THROWS_AS(adam.step(params, wrong), DimensionError);
}

TEST_CASE("train config validates and round trips through json") {
  TrainConfig cfg = tiny_train(3);
  CHECK_NOTHROW(cfg.validate());

  TrainConfig bad = cfg;
  bad.epochs = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.normalization = "z-score";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.loss_variant = "l1";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.optimizer = "sgd";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.checkpoint_every = -2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  cfg.checkpoint_every = 7;
  cfg.checkpoint_dir = "ckpt/run1";
  cfg.solver.alpha = 2.0;
  const nlohmann::json j = cfg;
  const TrainConfig back = j.get<TrainConfig>();
  CHECK(back.epochs == cfg.epochs);
  CHECK(back.learning_rate == cfg.learning_rate);
  CHECK(back.batch_size == cfg.batch_size);
  CHECK(back.seed == cfg.seed);
  CHECK(back.normalization == cfg.normalization);
  CHECK(back.checkpoint_every == 7);
  CHECK(back.checkpoint_dir == fs::path("ckpt/run1"));
  CHECK(back.solver.alpha == 2.0);
  CHECK(back.descriptor == cfg.descriptor);

  const TrainConfig partial = nlohmann::json{{"epochs", 12}}.get<TrainConfig>();
  CHECK(partial.epochs == 12);
  CHECK(partial.learning_rate == TrainConfig{}.learning_rate);
  CHECK(partial.normalization == "unit-diagonal");
}

TEST_CASE("zero epochs return untouched initial parameters") {
  const std::vector<RegistrationPair> data = {deformed_pair(24, 11)};
  const std::vector<RegistrationPair> other = {deformed_pair(24, 99, 0.3)};
  const TrainConfig cfg = tiny_train(0);

  const auto [params, report] = train(data, cfg);
  CHECK(report.epoch_loss.empty());
  CHECK(report.epoch_val_mean_distance.empty());
  CHECK(!report.config_hash.empty());

  // initialization depends only on config and seed, not on the data
  const auto [params2, report2] = train(other, cfg);
  CHECK(same_tensors(params, params2));
  CHECK(report.config_hash == report2.config_hash);

  TrainConfig changed = cfg;
  changed.learning_rate = 2e-3;
  const auto [params3, report3] = train(data, changed);
  CHECK(report3.config_hash != report.config_hash);

  CHECK_THROWS_AS(train({}, cfg), ConfigError);
}

TEST_CASE("identical config and seed reproduce the run exactly") {
  const std::vector<RegistrationPair> data = {deformed_pair(28, 21), deformed_pair(28, 22)};
  const TrainConfig cfg = tiny_train(3);

  const auto [params_a, report_a] = train(data, cfg);
  const auto [params_b, report_b] = train(data, cfg);
  REQUIRE(report_a.epoch_loss.size() == 3);
  CHECK(report_a.epoch_val_mean_distance.size() == 3);
  for (std::size_t e = 0; e < 3; ++e) {
    CHECK(report_a.epoch_loss[e] == report_b.epoch_loss[e]);
    CHECK(report_a.epoch_val_mean_distance[e] == report_b.epoch_val_mean_distance[e]);
  }
  CHECK(same_tensors(params_a, params_b));
  CHECK(report_a.wall_seconds >= 0.0);

  // a different seed takes a different trajectory
  TrainConfig reseeded = cfg;
  reseeded.seed = 6;
  const auto [params_c, report_c] = train(data, reseeded);
  CHECK(report_c.epoch_loss[0] != report_a.epoch_loss[0]);
}

TEST_CASE("training a trivial pair does not make it worse") {
  ChallengeSpec spec;  // identity challenge: target equals source
  const RegistrationPair pair = make_pair(sample_primitive("box", 32, 13), spec);
  REQUIRE(oracle::max_rel_err(pair.source.points, pair.target.points) == 0.0);

  TrainConfig cfg = tiny_train(5);
  cfg.batch_size = 1;
  const auto [params, report] = train({pair}, cfg);
  REQUIRE(report.epoch_loss.size() == 5);
  CHECK(report.epoch_loss.front() > 0.0);
  CHECK(report.epoch_loss.back() <= report.epoch_loss.front());
}

TEST_CASE("callback can stop training early") {
  const std::vector<RegistrationPair> data = {deformed_pair(24, 31)};
  const TrainConfig cfg = tiny_train(10);
  const auto [params, report] =
      train(data, cfg, [](int epoch, double, double) { return epoch < 1; });
  CHECK(report.epoch_loss.size() == 2);
}

TEST_CASE("an absurd learning rate raises a divergence error naming the epoch") {
  const std::vector<RegistrationPair> data = {deformed_pair(24, 41)};
  TrainConfig cfg = tiny_train(4);
  cfg.learning_rate = 1e200;
  CHECK_THROWS_WITH_AS(train(data, cfg), doctest::Contains("epoch"), DivergenceError);
}

TEST_CASE("checkpoints appear at the configured cadence with optimizer state") {
  const fs::path dir = scratch_dir("ckpt");
  const std::vector<RegistrationPair> data = {deformed_pair(24, 51)};
  TrainConfig cfg = tiny_train(5);
  cfg.checkpoint_every = 2;
  cfg.checkpoint_dir = dir;

  const auto [params, report] = train(data, cfg);
  CHECK(fs::exists(dir / "checkpoint_epoch_2.json"));
  CHECK(fs::exists(dir / "checkpoint_epoch_2.optim.json"));
  CHECK(fs::exists(dir / "checkpoint_epoch_4.json"));
  CHECK(fs::exists(dir / "checkpoint_epoch_4.optim.json"));
  CHECK(!fs::exists(dir / "checkpoint_epoch_5.json"));

  const DescriptorParams loaded = load_params(dir / "checkpoint_epoch_4.json");
  CHECK(loaded.cfg == cfg.descriptor);

  const ArrayStore optim = read_arrays(dir / "checkpoint_epoch_4.optim.json");
  CHECK(optim.meta.at("kind") == "adam-state");
  CHECK(optim.meta.at("steps").get<long>() == 4);  // one step per epoch at batch >= dataset
  CHECK(optim.arrays.size() == 2 * params.tensors().size());
  for (const auto& t : params.tensors()) {
    CHECK(optim.find("m." + t.name) != nullptr);
    CHECK(optim.find("v." + t.name) != nullptr);
  }
  fs::remove_all(dir);
}

TEST_CASE("gradients reach every parameter tensor and match a directional probe") {
  const RegistrationPair raw = deformed_pair(26, 61);
  TrainConfig cfg = tiny_train(1);

  // same preparation train() applies
  const double scale = 1.0 / bbox_diagonal(raw.source);
  const RegistrationPair pair = scaled_copy(raw, scale);

  DescriptorParams params = DescriptorParams::init(cfg.descriptor, 607);
  params.randomize(607);
  DescriptorParams grads = params.zeros_like();
  CandidateSet cs = build_candidates(pair.source, pair.target, cfg.solver);

  auto run_loss = [&] {
    const auto [fx, fy] = describe(pair.source, pair.target, params);
    return loss(pair, solve_from(cs, fx, fy, cfg.solver).field);
  };

  DescribeTrace dt;
  const auto [fx, fy] = describe_fwd(pair.source, pair.target, params, dt);
  SolveTrace st;
  const SolveResult res = solve_from(cs, fx, fy, cfg.solver, &st);

  const Eigen::Index m = pair.correspondences.size();
  RMat gfield = RMat::Zero(pair.source.size(), 3);
  for (Eigen::Index r = 0; r < m; ++r) {
    const int s = pair.correspondences.pairs(r, 0), t = pair.correspondences.pairs(r, 1);
    gfield.row(s) += (2.0 / static_cast<double>(m)) *
                     (pair.source.points.row(s) + res.field.displacements.row(s) -
                      pair.target.points.row(t));
  }
  RMat gfx = RMat::Zero(fx.rows(), fx.cols()), gfy = RMat::Zero(fy.rows(), fy.cols());
  solve_bwd(cs, cfg.solver, st, gfield, fx, fy, gfx, gfy);
  describe_bwd(params, grads, dt, gfx, gfy);

  for (const auto& t : grads.tensors()) {
    double peak = 0.0;
    for (Eigen::Index c = 0; c < t.size; ++c) peak = std::max(peak, std::abs(t.data[c]));
    INFO("tensor ", t.name);
    CHECK(peak > 0.0);
  }

  // one central difference along a fixed random direction across all tensors
  std::mt19937_64 rng(71);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  const auto refs = params.tensors(), grefs = grads.tensors();
  std::vector<std::vector<double>> direction(refs.size());
  double analytic = 0.0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    direction[i].resize(static_cast<std::size_t>(refs[i].size));
    for (Eigen::Index c = 0; c < refs[i].size; ++c) {
      direction[i][static_cast<std::size_t>(c)] = dist(rng);
      analytic += grefs[i].data[c] * direction[i][static_cast<std::size_t>(c)];
    }
  }
  const double h = 1e-6;
  auto nudge = [&](double sign) {
    for (std::size_t i = 0; i < refs.size(); ++i)
      for (Eigen::Index c = 0; c < refs[i].size; ++c)
        refs[i].data[c] += sign * h * direction[i][static_cast<std::size_t>(c)];
  };
  nudge(1.0);
  const double up = run_loss();
  nudge(-2.0);
  const double down = run_loss();
  nudge(1.0);
  const double fd = (up - down) / (2.0 * h);
  CHECK(oracle::rel_err(fd, analytic, 1e-8) < 1e-3);
}

TEST_CASE("unit-diagonal evaluation reports original units at any scale") {
  const RegistrationPair pair = deformed_pair(32, 81);
  const RegistrationPair big = scaled_copy(pair, 1000.0);

  const DescriptorParams params = DescriptorParams::init(tiny_descriptor(), 17);
  const SolverConfig solver = tiny_solver();

  const PairEval small_eval = evaluate_pair(params, pair, solver, "unit-diagonal");
  const PairEval big_eval = evaluate_pair(params, big, solver, "unit-diagonal");

  CHECK(oracle::rel_err(big_eval.initial_mean_distance, 1000.0 * small_eval.initial_mean_distance) <
        1e-9);
  CHECK(oracle::rel_err(big_eval.registered_mean_distance,
                        1000.0 * small_eval.registered_mean_distance) < 1e-9);
  CHECK(oracle::rel_err(big_eval.chamfer_registered, 1e6 * small_eval.chamfer_registered) < 1e-9);
  CHECK(oracle::max_rel_err(big_eval.field.displacements,
                            (1000.0 * small_eval.field.displacements).eval()) < 1e-9);

  // the registered metric agrees with geometry computed on the moved cloud
  PointCloud registered = pair.source;
  registered.points += small_eval.field.displacements;
  double direct = 0.0;
  for (Eigen::Index r = 0; r < pair.correspondences.size(); ++r) {
    const int s = pair.correspondences.pairs(r, 0), t = pair.correspondences.pairs(r, 1);
    direct += (registered.points.row(s) - pair.target.points.row(t)).norm();
  }
  direct /= static_cast<double>(pair.correspondences.size());
  CHECK(small_eval.registered_mean_distance == doctest::Approx(direct).epsilon(1e-12));
  CHECK(small_eval.chamfer_registered ==
        doctest::Approx(chamfer_distance(registered, pair.target)).epsilon(1e-12));
}

TEST_CASE("validation aggregates per-pair metrics") {
  std::vector<RegistrationPair> data;
  for (int i = 0; i < 4; ++i) data.push_back(deformed_pair(24, 200 + static_cast<std::uint64_t>(i)));
  const DescriptorParams params = DescriptorParams::init(tiny_descriptor(), 23);
  const SolverConfig solver = tiny_solver();

  const EvalMetrics metrics = validate(params, data, solver, "unit-diagonal");
  REQUIRE(metrics.per_pair.size() == 4);

  double mean_init = 0.0, mean_reg = 0.0, mean_ch = 0.0;
  std::vector<double> reg;
  for (std::size_t i = 0; i < 4; ++i) {
    const PairEval direct = evaluate_pair(params, data[i], solver, "unit-diagonal");
    CHECK(metrics.per_pair[i].registered_mean_distance == direct.registered_mean_distance);
    mean_init += direct.initial_mean_distance;
    mean_reg += direct.registered_mean_distance;
    mean_ch += direct.chamfer_registered;
    reg.push_back(direct.registered_mean_distance);
  }
  CHECK(metrics.mean_initial == doctest::Approx(mean_init / 4.0).epsilon(1e-12));
  CHECK(metrics.mean_registered == doctest::Approx(mean_reg / 4.0).epsilon(1e-12));
  CHECK(metrics.mean_chamfer_registered == doctest::Approx(mean_ch / 4.0).epsilon(1e-12));
  std::sort(reg.begin(), reg.end());
  CHECK(metrics.median_registered == doctest::Approx(0.5 * (reg[1] + reg[2])).epsilon(1e-12));

  const EvalMetrics odd = validate(params, {data.begin(), data.begin() + 3}, solver, "unit-diagonal");
  std::vector<double> reg3 = {odd.per_pair[0].registered_mean_distance,
                              odd.per_pair[1].registered_mean_distance,
                              odd.per_pair[2].registered_mean_distance};
  std::sort(reg3.begin(), reg3.end());
  CHECK(odd.median_registered == reg3[1]);
  CHECK(validate(params, {}, solver, "unit-diagonal").per_pair.empty());
}

TEST_CASE("validation epoch metric stays in original units during training") {
  const RegistrationPair pair = deformed_pair(26, 91);
  const std::vector<RegistrationPair> small = {pair};
  const std::vector<RegistrationPair> big = {scaled_copy(pair, 1000.0)};
  TrainConfig cfg = tiny_train(1);
  cfg.batch_size = 1;

  const auto [params_s, report_s] = train(small, cfg);
  const auto [params_b, report_b] = train(big, cfg);
  REQUIRE(report_s.epoch_val_mean_distance.size() == 1);
  CHECK(oracle::rel_err(report_b.epoch_val_mean_distance[0],
                        1000.0 * report_s.epoch_val_mean_distance[0]) < 1e-9);
  CHECK(report_b.epoch_loss[0] == doctest::Approx(report_s.epoch_loss[0]).epsilon(1e-9));
}
