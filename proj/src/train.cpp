#include "defreg/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "defreg/io.hpp"
#include "defreg/rng.hpp"

namespace defreg {

namespace {

constexpr std::uint64_t kSaltInit = 101;
constexpr std::uint64_t kSaltEpoch = 9000;

struct ScaledPair {
  RegistrationPair pair;
  double scale = 1.0;  // scaled coords = original coords * scale
};

ScaledPair apply_normalization(const RegistrationPair& pair, const std::string& mode) {
  ScaledPair sp{pair, 1.0};
  if (mode == "none") return sp;
  sp.scale = 1.0 / bbox_diagonal(pair.source);
  sp.pair.source.points *= sp.scale;
  sp.pair.target.points *= sp.scale;
  sp.pair.field_gt.displacements *= sp.scale;
  sp.pair.rigid.translation *= sp.scale;
  return sp;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be nonnegative");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (normalization != "unit-diagonal" && normalization != "none")
    throw ConfigError("normalization must be 'unit-diagonal' or 'none'");
  if (loss_variant != "corr-mse") throw ConfigError("unsupported loss variant '" + loss_variant + "'");
  if (optimizer != "adam") throw ConfigError("unsupported optimizer '" + optimizer + "'");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be nonnegative");
  descriptor.validate();
  solver.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"seed", c.seed},
                     {"normalization", c.normalization},
                     {"loss", c.loss_variant},
                     {"optimizer", c.optimizer},
                     {"descriptor", c.descriptor},
                     {"solver", c.solver},
                     {"checkpoint_every", c.checkpoint_every},
                     {"checkpoint_dir", c.checkpoint_dir.string()}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
  if (j.contains("learning_rate")) j.at("learning_rate").get_to(c.learning_rate);
  if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("normalization")) j.at("normalization").get_to(c.normalization);
  if (j.contains("loss")) j.at("loss").get_to(c.loss_variant);
  if (j.contains("optimizer")) j.at("optimizer").get_to(c.optimizer);
  if (j.contains("descriptor")) j.at("descriptor").get_to(c.descriptor);
  if (j.contains("solver")) j.at("solver").get_to(c.solver);
  if (j.contains("checkpoint_every")) j.at("checkpoint_every").get_to(c.checkpoint_every);
  if (j.contains("checkpoint_dir")) c.checkpoint_dir = j.at("checkpoint_dir").get<std::string>();
}

double loss(const RegistrationPair& pair, const DeformationField& field) {
  if (pair.correspondences.size() == 0) throw ConfigError("loss: pair has no correspondences");
  if (field.size() != pair.source.size()) throw DimensionError("loss: field must be source-aligned");
  const Eigen::Index m = pair.correspondences.size();
  double acc = 0.0;
  for (Eigen::Index r = 0; r < m; ++r) {
    const int s = pair.correspondences.pairs(r, 0);
    const int t = pair.correspondences.pairs(r, 1);
    acc += (pair.source.points.row(s) + field.displacements.row(s) - pair.target.points.row(t))
               .squaredNorm();
  }
  return acc / static_cast<double>(m);
}

void Adam::init(const std::vector<TensorRef>& params) {
  steps = 0;
  m.clear();
  v.clear();
  for (const auto& t : params) {
    m.push_back(Eigen::VectorXd::Zero(t.size));
    v.push_back(Eigen::VectorXd::Zero(t.size));
  }
}

void Adam::step(const std::vector<TensorRef>& params, const std::vector<TensorRef>& grads) {
  if (params.size() != grads.size() || params.size() != m.size())
    throw DimensionError("adam: parameter/gradient layout mismatch");
  ++steps;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Eigen::Map<Eigen::VectorXd> p(params[i].data, params[i].size);
    Eigen::Map<const Eigen::VectorXd> g(grads[i].data, grads[i].size);
    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
    v[i] = beta2 * v[i] + (1.0 - beta2) * g.cwiseProduct(g);
    p.array() -= lr * (m[i].array() / c1) / ((v[i].array() / c2).sqrt() + eps);
  }
}

std::pair<DescriptorParams, TrainReport> train(const std::vector<RegistrationPair>& dataset,
                                               const TrainConfig& cfg, const EpochCallback& callback) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("train: empty dataset");
  const auto t0 = std::chrono::steady_clock::now();

  DescriptorParams params = DescriptorParams::init(cfg.descriptor, mix_seed(cfg.seed, kSaltInit));
  DescriptorParams grads = params.zeros_like();
  Adam adam;
  adam.lr = cfg.learning_rate;
  adam.init(params.tensors());

  std::vector<ScaledPair> pairs;
  std::vector<CandidateSet> skeletons;
  pairs.reserve(dataset.size());
  skeletons.reserve(dataset.size());
  for (const auto& p : dataset) {
    pairs.push_back(apply_normalization(p, cfg.normalization));
    skeletons.push_back(build_candidates(pairs.back().pair.source, pairs.back().pair.target, cfg.solver));
  }

  TrainReport report;
  nlohmann::json cfg_json = cfg;
  report.config_hash = hash_hex(fnv1a64(cfg_json.dump()));

  const auto n_pairs = static_cast<int>(pairs.size());
  std::vector<int> order(static_cast<std::size_t>(n_pairs));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto epoch_rng = make_rng(mix_seed(cfg.seed, kSaltEpoch + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), epoch_rng);

    double loss_acc = 0.0, val_acc = 0.0;
    for (int start = 0; start < n_pairs; start += cfg.batch_size) {
      const int stop = std::min(start + cfg.batch_size, n_pairs);
      const double inv_batch = 1.0 / static_cast<double>(stop - start);
      grads.zero_all();

      for (int b = start; b < stop; ++b) {
        const auto idx = static_cast<std::size_t>(order[static_cast<std::size_t>(b)]);
        const RegistrationPair& sp = pairs[idx].pair;

        DescribeTrace dt;
        const auto [fx, fy] = describe_fwd(sp.source, sp.target, params, dt);
        SolveTrace st;
        const SolveResult res = solve_from(skeletons[idx], fx, fy, cfg.solver, &st);

        const double pair_loss = loss(sp, res.field);
        if (!std::isfinite(pair_loss))
          throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch));
        loss_acc += pair_loss;
        val_acc += corr_mean_distance(sp, res.field) / pairs[idx].scale;

        const Eigen::Index m_corr = sp.correspondences.size();
        RMat gfield = RMat::Zero(sp.source.size(), 3);
        for (Eigen::Index r = 0; r < m_corr; ++r) {
          const int s = sp.correspondences.pairs(r, 0);
          const int t = sp.correspondences.pairs(r, 1);
          gfield.row(s) += (2.0 * inv_batch / static_cast<double>(m_corr)) *
                           (sp.source.points.row(s) + res.field.displacements.row(s) -
                            sp.target.points.row(t));
        }
        RMat gfx = RMat::Zero(fx.rows(), fx.cols());
        RMat gfy = RMat::Zero(fy.rows(), fy.cols());
        solve_bwd(skeletons[idx], cfg.solver, st, gfield, fx, fy, gfx, gfy);
        describe_bwd(params, grads, dt, gfx, gfy);
      }
      adam.step(params.tensors(), grads.tensors());
    }

    report.epoch_loss.push_back(loss_acc / n_pairs);
    report.epoch_val_mean_distance.push_back(val_acc / n_pairs);

    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
      std::error_code ec;
      std::filesystem::create_directories(cfg.checkpoint_dir, ec);
      const std::string stem = "checkpoint_epoch_" + std::to_string(epoch + 1);
      save_params(params, cfg.checkpoint_dir / (stem + ".json"));

      ArrayStore optim;
      optim.meta = nlohmann::json{{"kind", "adam-state"}, {"steps", adam.steps}};
      const auto refs = params.tensors();
      for (std::size_t i = 0; i < refs.size(); ++i) {
        optim.arrays.emplace_back("m." + refs[i].name, adam.m[i].transpose());
        optim.arrays.emplace_back("v." + refs[i].name, adam.v[i].transpose());
      }
      write_arrays(optim, cfg.checkpoint_dir / (stem + ".optim.json"));
    }
    if (callback && !callback(epoch, report.epoch_loss.back(), report.epoch_val_mean_distance.back()))
      break;
  }

  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(params), std::move(report)};
}

PairEval evaluate_pair(const DescriptorParams& params, const RegistrationPair& pair,
                       const SolverConfig& solver_cfg, const std::string& normalization) {
  const ScaledPair sp = apply_normalization(pair, normalization);
  const auto [fx, fy] = describe(sp.pair.source, sp.pair.target, params);
  const SolveResult res = solve(sp.pair.source, sp.pair.target, fx, fy, solver_cfg);

  PairEval eval;
  eval.field.displacements = res.field.displacements / sp.scale;
  eval.initial_mean_distance = corr_mean_distance(pair);
  eval.registered_mean_distance = corr_mean_distance(pair, eval.field);
  PointCloud registered = pair.source;
  registered.points += eval.field.displacements;
  eval.chamfer_initial = chamfer_distance(pair.source, pair.target);
  eval.chamfer_registered = chamfer_distance(registered, pair.target);
  return eval;
}

EvalMetrics validate(const DescriptorParams& params, const std::vector<RegistrationPair>& dataset,
                     const SolverConfig& solver_cfg, const std::string& normalization) {
  EvalMetrics metrics;
  if (dataset.empty()) return metrics;
  for (const auto& pair : dataset)
    metrics.per_pair.push_back(evaluate_pair(params, pair, solver_cfg, normalization));

  std::vector<double> registered;
  for (const auto& e : metrics.per_pair) {
    metrics.mean_initial += e.initial_mean_distance;
    metrics.mean_registered += e.registered_mean_distance;
    metrics.mean_chamfer_registered += e.chamfer_registered;
    registered.push_back(e.registered_mean_distance);
  }
  const auto count = static_cast<double>(metrics.per_pair.size());
  metrics.mean_initial /= count;
  metrics.mean_registered /= count;
  metrics.mean_chamfer_registered /= count;
  std::sort(registered.begin(), registered.end());
  const std::size_t mid = registered.size() / 2;
  metrics.median_registered = registered.size() % 2 == 1
                                  ? registered[mid]
                                  : 0.5 * (registered[mid - 1] + registered[mid]);
  return metrics;
}

}  // namespace defreg
