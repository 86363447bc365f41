#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "defreg/solver.hpp"
#include "defreg/synth.hpp"

namespace defreg {

struct TrainConfig {
  int epochs = 100;
  double learning_rate = 1e-3;
  int batch_size = 4;
  std::uint64_t seed = 0;
  std::string normalization = "unit-diagonal";  // or "none"
  std::string loss_variant = "corr-mse";
  std::string optimizer = "adam";
  DescriptorConfig descriptor;
  SolverConfig solver;
  int checkpoint_every = 0;  // epochs between checkpoints, 0 disables
  std::filesystem::path checkpoint_dir;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainReport {
  std::vector<double> epoch_loss;
  // registered mean distance over correspondences, original units, computed
  // from the fields produced during the epoch itself
  std::vector<double> epoch_val_mean_distance;
  double wall_seconds = 0.0;
  std::string config_hash;
};

// Mean over ground-truth correspondences of the squared registered residual;
// field is source-aligned.
double loss(const RegistrationPair& pair, const DeformationField& field);

struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long steps = 0;
  std::vector<Eigen::VectorXd> m, v;

  void init(const std::vector<TensorRef>& params);
  void step(const std::vector<TensorRef>& params, const std::vector<TensorRef>& grads);
};

// Returns false to stop training after the current epoch.
using EpochCallback = std::function<bool(int epoch, double epoch_loss, double val_mean_distance)>;

std::pair<DescriptorParams, TrainReport> train(const std::vector<RegistrationPair>& dataset,
                                               const TrainConfig& cfg,
                                               const EpochCallback& callback = {});

struct PairEval {
  double initial_mean_distance = 0.0;
  double registered_mean_distance = 0.0;
  double chamfer_initial = 0.0;
  double chamfer_registered = 0.0;
  DeformationField field;  // original units, source-aligned
};

PairEval evaluate_pair(const DescriptorParams& params, const RegistrationPair& pair,
                       const SolverConfig& solver_cfg, const std::string& normalization);

struct EvalMetrics {
  std::vector<PairEval> per_pair;
  double mean_initial = 0.0;
  double mean_registered = 0.0;
  double median_registered = 0.0;
  double mean_chamfer_registered = 0.0;
};

EvalMetrics validate(const DescriptorParams& params, const std::vector<RegistrationPair>& dataset,
                     const SolverConfig& solver_cfg, const std::string& normalization);

}  // namespace defreg
