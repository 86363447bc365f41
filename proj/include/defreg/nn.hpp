#pragma once

#include <Eigen/Dense>
#include <random>
#include <string>
#include <vector>

#include "defreg/common.hpp"

namespace defreg {

// Activations are row-per-point matrices; layers apply y = x * W + b.
using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct TensorRef {
  std::string name;
  double* data;
  Eigen::Index size;
};

struct Linear {
  RMat W;                 // in x out
  Eigen::RowVectorXd b;   // size 0 means no bias

  void init_xavier(Eigen::Index in, Eigen::Index out, bool bias, std::mt19937_64& rng);
  void collect(const std::string& prefix, std::vector<TensorRef>& out);
};

struct LinearCache {
  RMat x;
};
RMat linear_fwd(const Linear& p, const RMat& x, LinearCache& cache);
// returns grad wrt x, accumulates into g
RMat linear_bwd(const Linear& p, Linear& g, const LinearCache& cache, const RMat& gy);

RMat relu_fwd(const RMat& x);
RMat relu_bwd(const RMat& x, const RMat& gy);

inline constexpr double kNormEps = 1e-5;

// Normalizes each column (channel) over the rows (points) of one instance.
struct InstanceNorm {
  Eigen::RowVectorXd gamma, beta;

  void init(Eigen::Index width);
  void collect(const std::string& prefix, std::vector<TensorRef>& out);
};

struct InstanceNormCache {
  RMat xhat;
  Eigen::RowVectorXd inv_std;
};
RMat instnorm_fwd(const InstanceNorm& p, const RMat& x, InstanceNormCache& cache);
RMat instnorm_bwd(const InstanceNorm& p, InstanceNorm& g, const InstanceNormCache& cache, const RMat& gy);

// Normalizes each row (feature vector) independently.
struct LayerNorm {
  Eigen::RowVectorXd gamma, beta;

  void init(Eigen::Index width);
  void collect(const std::string& prefix, std::vector<TensorRef>& out);
};

struct LayerNormCache {
  RMat xhat;
  Eigen::VectorXd inv_std;
};
RMat layernorm_fwd(const LayerNorm& p, const RMat& x, LayerNormCache& cache);
RMat layernorm_bwd(const LayerNorm& p, LayerNorm& g, const LayerNormCache& cache, const RMat& gy);

RMat softmax_rows(const RMat& x);
// y is the forward output
RMat softmax_rows_bwd(const RMat& y, const RMat& gy);

struct AttnCache {
  RMat A, Q, K, V;
};
// softmax(Q K^T / sqrt(d_k)) V, softmax row-wise
RMat attention_fwd(const RMat& Q, const RMat& K, const RMat& V, AttnCache& cache);
void attention_bwd(const AttnCache& cache, const RMat& gO, RMat& gQ, RMat& gK, RMat& gV);

struct Mha {
  Linear wq, wk, wv, wo;  // d_model x d_model, no biases
  int heads = 1;

  void init(Eigen::Index d_model, int h, std::mt19937_64& rng);
  void collect(const std::string& prefix, std::vector<TensorRef>& out);
};

struct MhaCache {
  LinearCache cq, ck, cv, co;
  std::vector<AttnCache> head;
};
RMat mha_fwd(const Mha& p, const RMat& xq, const RMat& xkv, MhaCache& cache);
// accumulates input grads into gxq / gxkv (they may alias the same matrix)
void mha_bwd(const Mha& p, Mha& g, const MhaCache& cache, const RMat& gy, RMat& gxq, RMat& gxkv);

// Edge function l: ReLU(theta_l . (x_j - x_i) + phi_l . x_i), aggregated by
// max over the k listed neighbors j of i.
struct EdgeLayer {
  RMat theta, phi;  // in x out

  void init(Eigen::Index in, Eigen::Index out, std::mt19937_64& rng);
  void collect(const std::string& prefix, std::vector<TensorRef>& out);
};

struct EdgeConvCache {
  RMat feat;
  Eigen::MatrixXi idx;
  RMat pre;               // (n*k) x out, pre-activation
  Eigen::MatrixXi argmax; // n x out, winning neighbor slot
};
RMat edgeconv_fwd(const EdgeLayer& p, const RMat& feat, const Eigen::MatrixXi& idx, EdgeConvCache& cache);
RMat edgeconv_bwd(const EdgeLayer& p, EdgeLayer& g, const EdgeConvCache& cache, const RMat& gy);

// Column-wise max over all rows (global pooling to one row).
Eigen::RowVectorXd maxpool_fwd(const RMat& x, std::vector<int>& argmax);
RMat maxpool_bwd(Eigen::Index rows, const std::vector<int>& argmax, const Eigen::RowVectorXd& gy);

}  // namespace defreg
