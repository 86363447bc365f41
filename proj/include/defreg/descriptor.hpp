#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include <json.hpp>

#include "defreg/geometry.hpp"
#include "defreg/nn.hpp"

namespace defreg {

// Per-point descriptor matrix, one row per point, d_model columns.
using FeatureField = RMat;

struct DescriptorConfig {
  int k_edge = 20;
  std::vector<int> edge_widths = {64, 128, 256};
  std::vector<int> align_conv_widths = {64, 128, 1024};
  std::vector<int> align_fc_widths = {512, 256};
  int heads = 4;
  int d_ff = 512;

  int d_model() const { return edge_widths.back(); }
  void validate() const;
  bool operator==(const DescriptorConfig&) const = default;
};

void to_json(nlohmann::json& j, const DescriptorConfig& c);
void from_json(const nlohmann::json& j, DescriptorConfig& c);

// Predicts a 3x3 alignment matrix from the whole cloud: per-point linear
// stack with instance norm + ReLU, max-pool bottleneck, then fully connected
// layers. The final layer starts at zero weights with an identity bias, so a
// fresh net outputs the identity for any input.
struct AlignNet {
  std::vector<Linear> conv;        // bias-free (instance norm absorbs bias)
  std::vector<InstanceNorm> norm;
  Linear fc1, fc2, fc3;

  void collect(const std::string& prefix, std::vector<TensorRef>& out);
};

struct EncoderBlock {
  Mha self;
  LayerNorm ln1;
  Linear ff1, ff2;
  LayerNorm ln2;

  void collect(const std::string& prefix, std::vector<TensorRef>& out);
};

struct DecoderBlock {
  Mha self;
  LayerNorm ln1;
  Mha cross;
  LayerNorm ln2;
  Linear ff1, ff2;
  LayerNorm ln3;

  void collect(const std::string& prefix, std::vector<TensorRef>& out);
};

struct FuseParams {
  EncoderBlock enc;
  DecoderBlock dec;
  Linear out_proj;  // d_model x d_model, no bias

  void collect(const std::string& prefix, std::vector<TensorRef>& out);
};

struct DescriptorParams {
  DescriptorConfig cfg;
  AlignNet align;
  std::vector<EdgeLayer> edge;
  FuseParams fuse;

  static DescriptorParams init(const DescriptorConfig& cfg, std::uint64_t seed);

  // Enumerates every tensor with a stable name and flat view; the order is
  // fixed by construction and shared with the gradient twin.
  std::vector<TensorRef> tensors() const;
  DescriptorParams zeros_like() const;
  void zero_all();
  // Fills every tensor with small nonzero values (norm scales near 1); used
  // to put the net in generic position for gradient checks.
  void randomize(std::uint64_t seed);
};

// ---- forward traces (kept for the backward pass) ----

struct AlignTrace {
  RMat input;
  std::vector<LinearCache> conv_c;
  std::vector<InstanceNormCache> norm_c;
  std::vector<RMat> norm_out;  // pre-ReLU
  std::vector<int> pool_argmax;
  Eigen::Index n = 0;
  LinearCache fc1_c, fc2_c, fc3_c;
  RMat fc1_pre, fc2_pre;
  Eigen::Matrix3d M;
};

struct FfTrace {
  LinearCache c1, c2;
  RMat pre;
};

struct EncTrace {
  MhaCache self_c;
  LayerNormCache ln1_c;
  FfTrace ff;
  LayerNormCache ln2_c;
};

struct DecTrace {
  MhaCache self_c;
  LayerNormCache ln1_c;
  MhaCache cross_c;
  LayerNormCache ln2_c;
  FfTrace ff;
  LayerNormCache ln3_c;
};

struct PhiTrace {
  EncTrace enc;
  DecTrace dec;
  LinearCache out_c;
};

struct FuseTrace {
  PhiTrace x;  // phi(F_X, F_Y)
  PhiTrace y;  // phi(F_Y, F_X)
};

struct EdgeStackTrace {
  std::vector<EdgeConvCache> layer_c;
};

struct DescribeTrace {
  AlignTrace align_x, align_y;
  RMat aligned_x, aligned_y;
  EdgeStackTrace edge_x, edge_y;
  FuseTrace fuse;
};

// ---- operations ----

Eigen::Matrix3d alignment_transform(const PointCloud& cloud, const DescriptorParams& params);
Eigen::Matrix3d align_fwd(const AlignNet& p, const RMat& pts, AlignTrace& trace);
void align_bwd(const AlignNet& p, AlignNet& g, const AlignTrace& trace, const Eigen::Matrix3d& gM);

RMat edge_stack_fwd(const DescriptorParams& p, const RMat& aligned, EdgeStackTrace& trace);
RMat edge_stack_bwd(const DescriptorParams& p, DescriptorParams& g, const EdgeStackTrace& trace,
                    const RMat& gF);

std::pair<FeatureField, FeatureField> transformer_fuse(const FeatureField& fx, const FeatureField& fy,
                                                       const DescriptorParams& params);
std::pair<FeatureField, FeatureField> fuse_fwd(const FuseParams& p, const RMat& fx, const RMat& fy,
                                               FuseTrace& trace);
void fuse_bwd(const FuseParams& p, FuseParams& g, const FuseTrace& trace, const RMat& gphix,
              const RMat& gphiy, RMat& gfx, RMat& gfy);

std::pair<FeatureField, FeatureField> describe(const PointCloud& source, const PointCloud& target,
                                               const DescriptorParams& params);
std::pair<FeatureField, FeatureField> describe_fwd(const PointCloud& source, const PointCloud& target,
                                                   const DescriptorParams& params, DescribeTrace& trace);
void describe_bwd(const DescriptorParams& params, DescriptorParams& grads, const DescribeTrace& trace,
                  const RMat& gphix, const RMat& gphiy);

// Checkpoint container round trip (bit-exact).
void save_params(const DescriptorParams& params, const std::filesystem::path& path);
DescriptorParams load_params(const std::filesystem::path& path);

}  // namespace defreg
