#pragma once

#include <utility>
#include <vector>

#include <json.hpp>

#include "defreg/descriptor.hpp"
#include "defreg/geometry.hpp"

namespace defreg {

struct SolverConfig {
  int k_cand = 16;
  int k_reg = 8;
  double alpha = 1.0;
  int lbp_iterations = 5;
  double softmax_temperature = 1.0;
  // 0 keeps the hard min of the message update; > 0 switches to a smooth
  // min with this temperature (experimental).
  double softmin_temperature = 0.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SolverConfig& c);
void from_json(const nlohmann::json& j, SolverConfig& c);

// Geometry-only skeleton plus the mutable inference state. The skeleton
// (candidates, graph, displacement vectors, pairwise costs) depends only on
// the two clouds and can be reused across feature evaluations.
struct CandidateSet {
  Eigen::MatrixXi candidates;    // n x k, target indices
  Eigen::MatrixXi source_graph;  // n x k_reg, self excluded
  RMat disp;                     // (n*k) x 3, row i*k+p = c_i^p - x_i

  std::vector<std::pair<int, int>> edges;  // directed (i -> j)
  std::vector<int> reverse_edge;           // edge id of (j -> i)
  std::vector<std::vector<int>> in_edges;  // per node, incoming edge ids
  std::vector<RMat> pair_cost;             // per directed edge, k x k: (p of i, q of j)

  RMat unary;     // n x k, set before sweeping
  RMat messages;  // E x k

  Eigen::Index n() const { return candidates.rows(); }
  Eigen::Index k() const { return candidates.cols(); }
  Eigen::Index edge_count() const { return static_cast<Eigen::Index>(edges.size()); }
};

// Fills edges/reverse_edge/in_edges from an undirected edge list and zeroes
// the messages; used by build_candidates and by hand-built test graphs.
void build_edge_structure(CandidateSet& cs, int n, int k,
                          const std::vector<std::pair<int, int>>& undirected);

CandidateSet build_candidates(const PointCloud& source, const PointCloud& target,
                              const SolverConfig& cfg);

// entry (i,p): squared feature distance between source point i and its
// candidate c_i^p
RMat unary_costs(const FeatureField& fx, const FeatureField& fy, const CandidateSet& cs);

// squared norm of the difference of the two candidate displacements
double pairwise_cost(const Eigen::Vector3d& xi, const Eigen::Vector3d& xj, const Eigen::Vector3d& cip,
                     const Eigen::Vector3d& cjq);

void reset_messages(CandidateSet& cs);

struct SweepRecord {
  Eigen::MatrixXi argmin;      // E x k, winning sender candidate per entry
  std::vector<int> norm_argmin;
  RMat prev_messages;          // messages the sweep read (E x k)
};

// One synchronous min-sum sweep over all directed edges; message vectors are
// shifted to minimum 0 afterward unless normalize is false.
void lbp_sweep(CandidateSet& cs, const SolverConfig& cfg, bool normalize = true,
               SweepRecord* record = nullptr);

// belief(i,p) = unary(i,p) + sum of incoming messages at p
RMat beliefs(const CandidateSet& cs);

struct SolveResult {
  DeformationField field;  // source-aligned
  RMat weights;            // n x k softmax weights
};

struct SolveTrace {
  std::vector<SweepRecord> sweeps;
  RMat weights;
};

SolveResult solve(const PointCloud& source, const PointCloud& target, const FeatureField& fx,
                  const FeatureField& fy, const SolverConfig& cfg);

// Skeleton-reusing variant; records a trace when given one.
SolveResult solve_from(CandidateSet& cs, const FeatureField& fx, const FeatureField& fy,
                       const SolverConfig& cfg, SolveTrace* trace = nullptr);

// Accumulates d loss / d features into gfx / gfy given d loss / d field.
// Gradients follow the selected min branch of every message update.
void solve_bwd(const CandidateSet& cs, const SolverConfig& cfg, const SolveTrace& trace,
               const RMat& gfield, const FeatureField& fx, const FeatureField& fy, RMat& gfx,
               RMat& gfy);

}  // namespace defreg
