#include "defreg/descriptor.hpp"

#include <algorithm>

#include "defreg/io.hpp"
#include "defreg/rng.hpp"

namespace defreg {

namespace {

using nlohmann::json;

// neighbor graph over the current feature rows, self excluded
Eigen::MatrixXi feature_graph(const RMat& feat, int k_edge) {
  if (feat.rows() <= k_edge) throw DimensionError("edge graph: need more points than k_edge");
  return knn_indices_self_excluded(feat, k_edge);
}

RMat ff_fwd(const Linear& l1, const Linear& l2, const RMat& x, FfTrace& t) {
  t.pre = linear_fwd(l1, x, t.c1);
  return linear_fwd(l2, relu_fwd(t.pre), t.c2);
}

RMat ff_bwd(const Linear& l1, const Linear& l2, Linear& g1, Linear& g2, const FfTrace& t, const RMat& gy) {
  const RMat gh = linear_bwd(l2, g2, t.c2, gy);
  return linear_bwd(l1, g1, t.c1, relu_bwd(t.pre, gh));
}

RMat enc_fwd(const EncoderBlock& p, const RMat& b, EncTrace& t) {
  const RMat s = mha_fwd(p.self, b, b, t.self_c);
  const RMat h1 = layernorm_fwd(p.ln1, b + s, t.ln1_c);
  const RMat f = ff_fwd(p.ff1, p.ff2, h1, t.ff);
  return layernorm_fwd(p.ln2, h1 + f, t.ln2_c);
}

RMat enc_bwd(const EncoderBlock& p, EncoderBlock& g, const EncTrace& t, const RMat& gout) {
  const RMat gr2 = layernorm_bwd(p.ln2, g.ln2, t.ln2_c, gout);
  RMat gh1 = gr2;
  gh1 += ff_bwd(p.ff1, p.ff2, g.ff1, g.ff2, t.ff, gr2);
  const RMat gr1 = layernorm_bwd(p.ln1, g.ln1, t.ln1_c, gh1);
  RMat gb = gr1;
  mha_bwd(p.self, g.self, t.self_c, gr1, gb, gb);
  return gb;
}

RMat dec_fwd(const DecoderBlock& p, const RMat& a, const RMat& enc_out, DecTrace& t) {
  const RMat s = mha_fwd(p.self, a, a, t.self_c);
  const RMat h1 = layernorm_fwd(p.ln1, a + s, t.ln1_c);
  const RMat c = mha_fwd(p.cross, h1, enc_out, t.cross_c);
  const RMat h2 = layernorm_fwd(p.ln2, h1 + c, t.ln2_c);
  const RMat f = ff_fwd(p.ff1, p.ff2, h2, t.ff);
  return layernorm_fwd(p.ln3, h2 + f, t.ln3_c);
}

RMat dec_bwd(const DecoderBlock& p, DecoderBlock& g, const DecTrace& t, const RMat& gout, RMat& genc_out) {
  const RMat gr3 = layernorm_bwd(p.ln3, g.ln3, t.ln3_c, gout);
  RMat gh2 = gr3;
  gh2 += ff_bwd(p.ff1, p.ff2, g.ff1, g.ff2, t.ff, gr3);
  const RMat gr2 = layernorm_bwd(p.ln2, g.ln2, t.ln2_c, gh2);
  RMat gh1 = gr2;
  mha_bwd(p.cross, g.cross, t.cross_c, gr2, gh1, genc_out);
  const RMat gr1 = layernorm_bwd(p.ln1, g.ln1, t.ln1_c, gh1);
  RMat ga = gr1;
  mha_bwd(p.self, g.self, t.self_c, gr1, ga, ga);
  return ga;
}

// phi(a, b): encoder consumes b, decoder consumes a conditioned on the
// encoder output; a final no-bias projection lets "all projections zero"
// force phi to vanish exactly.
RMat phi_fwd(const FuseParams& p, const RMat& a, const RMat& b, PhiTrace& t) {
  const RMat enc_out = enc_fwd(p.enc, b, t.enc);
  const RMat dec_out = dec_fwd(p.dec, a, enc_out, t.dec);
  return linear_fwd(p.out_proj, dec_out, t.out_c);
}

void phi_bwd(const FuseParams& p, FuseParams& g, const PhiTrace& t, const RMat& gphi, RMat& ga, RMat& gb) {
  const RMat gdec = linear_bwd(p.out_proj, g.out_proj, t.out_c, gphi);
  RMat genc_out = RMat::Zero(gb.rows(), gb.cols());
  ga += dec_bwd(p.dec, g.dec, t.dec, gdec, genc_out);
  gb += enc_bwd(p.enc, g.enc, t.enc, genc_out);
}

RMat cloud_matrix(const PointCloud& cloud) { return cloud.points; }

}  // namespace

void DescriptorConfig::validate() const {
  if (k_edge < 1) throw ConfigError("k_edge must be positive");
  if (edge_widths.empty()) throw ConfigError("edge_widths must be non-empty");
  for (int w : edge_widths)
    if (w < 1) throw ConfigError("edge widths must be positive");
  if (align_conv_widths.empty()) throw ConfigError("align_conv_widths must be non-empty");
  for (int w : align_conv_widths)
    if (w < 1) throw ConfigError("align conv widths must be positive");
  if (align_fc_widths.size() != 2) throw ConfigError("align_fc_widths must list exactly 2 layers");
  for (int w : align_fc_widths)
    if (w < 1) throw ConfigError("align fc widths must be positive");
  if (heads < 1) throw ConfigError("heads must be positive");
  if (d_model() % heads != 0) throw ConfigError("d_model must be divisible by heads");
  if (d_ff < 1) throw ConfigError("d_ff must be positive");
}

void to_json(json& j, const DescriptorConfig& c) {
  j = json{{"k_edge", c.k_edge},
           {"edge_widths", c.edge_widths},
           {"align_conv_widths", c.align_conv_widths},
           {"align_fc_widths", c.align_fc_widths},
           {"heads", c.heads},
           {"d_ff", c.d_ff}};
}

void from_json(const json& j, DescriptorConfig& c) {
  c = DescriptorConfig{};
  if (j.contains("k_edge")) j.at("k_edge").get_to(c.k_edge);
  if (j.contains("edge_widths")) j.at("edge_widths").get_to(c.edge_widths);
  if (j.contains("align_conv_widths")) j.at("align_conv_widths").get_to(c.align_conv_widths);
  if (j.contains("align_fc_widths")) j.at("align_fc_widths").get_to(c.align_fc_widths);
  if (j.contains("heads")) j.at("heads").get_to(c.heads);
  if (j.contains("d_ff")) j.at("d_ff").get_to(c.d_ff);
}

void AlignNet::collect(const std::string& prefix, std::vector<TensorRef>& out) {
  for (std::size_t l = 0; l < conv.size(); ++l) {
    conv[l].collect(prefix + ".conv" + std::to_string(l), out);
    norm[l].collect(prefix + ".norm" + std::to_string(l), out);
  }
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
  fc3.collect(prefix + ".fc3", out);
}

void EncoderBlock::collect(const std::string& prefix, std::vector<TensorRef>& out) {
  self.collect(prefix + ".self", out);
  ln1.collect(prefix + ".ln1", out);
  ff1.collect(prefix + ".ff1", out);
  ff2.collect(prefix + ".ff2", out);
  ln2.collect(prefix + ".ln2", out);
}

void DecoderBlock::collect(const std::string& prefix, std::vector<TensorRef>& out) {
  self.collect(prefix + ".self", out);
  ln1.collect(prefix + ".ln1", out);
  cross.collect(prefix + ".cross", out);
  ln2.collect(prefix + ".ln2", out);
  ff1.collect(prefix + ".ff1", out);
  ff2.collect(prefix + ".ff2", out);
  ln3.collect(prefix + ".ln3", out);
}

void FuseParams::collect(const std::string& prefix, std::vector<TensorRef>& out) {
  enc.collect(prefix + ".enc", out);
  dec.collect(prefix + ".dec", out);
  out_proj.collect(prefix + ".out_proj", out);
}

DescriptorParams DescriptorParams::init(const DescriptorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  DescriptorParams p;
  p.cfg = cfg;
  auto rng = make_rng(seed);

  Eigen::Index in = 3;
  for (int w : cfg.align_conv_widths) {
    Linear conv;
    conv.init_xavier(in, w, false, rng);
    InstanceNorm norm;
    norm.init(w);
    p.align.conv.push_back(std::move(conv));
    p.align.norm.push_back(std::move(norm));
    in = w;
  }
  p.align.fc1.init_xavier(in, cfg.align_fc_widths[0], true, rng);
  p.align.fc2.init_xavier(cfg.align_fc_widths[0], cfg.align_fc_widths[1], true, rng);
  // zero weights + identity bias: a fresh net predicts the identity transform
  p.align.fc3.W = RMat::Zero(cfg.align_fc_widths[1], 9);
  p.align.fc3.b = Eigen::RowVectorXd::Zero(9);
  p.align.fc3.b[0] = p.align.fc3.b[4] = p.align.fc3.b[8] = 1.0;

  in = 3;
  for (int w : cfg.edge_widths) {
    EdgeLayer layer;
    layer.init(in, w, rng);
    p.edge.push_back(std::move(layer));
    in = w;
  }

  const Eigen::Index d = cfg.d_model();
  p.fuse.enc.self.init(d, cfg.heads, rng);
  p.fuse.enc.ln1.init(d);
  p.fuse.enc.ff1.init_xavier(d, cfg.d_ff, true, rng);
  p.fuse.enc.ff2.init_xavier(cfg.d_ff, d, true, rng);
  p.fuse.enc.ln2.init(d);
  p.fuse.dec.self.init(d, cfg.heads, rng);
  p.fuse.dec.ln1.init(d);
  p.fuse.dec.cross.init(d, cfg.heads, rng);
  p.fuse.dec.ln2.init(d);
  p.fuse.dec.ff1.init_xavier(d, cfg.d_ff, true, rng);
  p.fuse.dec.ff2.init_xavier(cfg.d_ff, d, true, rng);
  p.fuse.dec.ln3.init(d);
  p.fuse.out_proj.init_xavier(d, d, false, rng);
  return p;
}

std::vector<TensorRef> DescriptorParams::tensors() const {
  auto* self = const_cast<DescriptorParams*>(this);
  std::vector<TensorRef> out;
  self->align.collect("align", out);
  for (std::size_t l = 0; l < self->edge.size(); ++l)
    self->edge[l].collect("edge" + std::to_string(l), out);
  self->fuse.collect("fuse", out);
  return out;
}

void DescriptorParams::zero_all() {
  for (auto& t : tensors()) std::fill(t.data, t.data + t.size, 0.0);
}

DescriptorParams DescriptorParams::zeros_like() const {
  DescriptorParams g = *this;
  g.zero_all();
  return g;
}

void DescriptorParams::randomize(std::uint64_t seed) {
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& t : tensors()) {
    const bool is_gamma = t.name.size() >= 6 && t.name.compare(t.name.size() - 6, 6, ".gamma") == 0;
    for (Eigen::Index i = 0; i < t.size; ++i) t.data[i] = (is_gamma ? 1.0 : 0.0) + 0.3 * u(rng);
  }
}

Eigen::Matrix3d align_fwd(const AlignNet& p, const RMat& pts, AlignTrace& t) {
  if (pts.rows() < 2) throw DimensionError("alignment transform needs at least 2 points");
  t.input = pts;
  t.n = pts.rows();
  t.conv_c.resize(p.conv.size());
  t.norm_c.resize(p.conv.size());
  t.norm_out.resize(p.conv.size());
  RMat x = pts;
  for (std::size_t l = 0; l < p.conv.size(); ++l) {
    x = linear_fwd(p.conv[l], x, t.conv_c[l]);
    x = instnorm_fwd(p.norm[l], x, t.norm_c[l]);
    t.norm_out[l] = x;
    x = relu_fwd(x);
  }
  RMat pooled(1, x.cols());
  pooled.row(0) = maxpool_fwd(x, t.pool_argmax);
  t.fc1_pre = linear_fwd(p.fc1, pooled, t.fc1_c);
  t.fc2_pre = linear_fwd(p.fc2, relu_fwd(t.fc1_pre), t.fc2_c);
  const RMat v = linear_fwd(p.fc3, relu_fwd(t.fc2_pre), t.fc3_c);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) t.M(r, c) = v(0, r * 3 + c);
  return t.M;
}

void align_bwd(const AlignNet& p, AlignNet& g, const AlignTrace& t, const Eigen::Matrix3d& gM) {
  RMat gv(1, 9);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) gv(0, r * 3 + c) = gM(r, c);
  RMat gh = linear_bwd(p.fc3, g.fc3, t.fc3_c, gv);
  gh = linear_bwd(p.fc2, g.fc2, t.fc2_c, relu_bwd(t.fc2_pre, gh));
  gh = linear_bwd(p.fc1, g.fc1, t.fc1_c, relu_bwd(t.fc1_pre, gh));
  RMat gx = maxpool_bwd(t.n, t.pool_argmax, gh.row(0));
  for (std::size_t l = p.conv.size(); l-- > 0;) {
    gx = relu_bwd(t.norm_out[l], gx);
    gx = instnorm_bwd(p.norm[l], g.norm[l], t.norm_c[l], gx);
    gx = linear_bwd(p.conv[l], g.conv[l], t.conv_c[l], gx);
  }
}

Eigen::Matrix3d alignment_transform(const PointCloud& cloud, const DescriptorParams& params) {
  AlignTrace t;
  return align_fwd(params.align, cloud_matrix(cloud), t);
}

RMat edge_stack_fwd(const DescriptorParams& p, const RMat& aligned, EdgeStackTrace& t) {
  t.layer_c.resize(p.edge.size());
  RMat feat = aligned;
  for (std::size_t l = 0; l < p.edge.size(); ++l) {
    const Eigen::MatrixXi idx = feature_graph(feat, p.cfg.k_edge);
    feat = edgeconv_fwd(p.edge[l], feat, idx, t.layer_c[l]);
  }
  return feat;
}

RMat edge_stack_bwd(const DescriptorParams& p, DescriptorParams& g, const EdgeStackTrace& t,
                    const RMat& gF) {
  RMat gx = gF;
  for (std::size_t l = p.edge.size(); l-- > 0;) gx = edgeconv_bwd(p.edge[l], g.edge[l], t.layer_c[l], gx);
  return gx;
}

std::pair<FeatureField, FeatureField> fuse_fwd(const FuseParams& p, const RMat& fx, const RMat& fy,
                                               FuseTrace& t) {
  if (fx.cols() != fy.cols()) throw DimensionError("transformer fuse: width mismatch");
  FeatureField phix = fx + phi_fwd(p, fx, fy, t.x);
  FeatureField phiy = fy + phi_fwd(p, fy, fx, t.y);
  return {std::move(phix), std::move(phiy)};
}

void fuse_bwd(const FuseParams& p, FuseParams& g, const FuseTrace& t, const RMat& gphix,
              const RMat& gphiy, RMat& gfx, RMat& gfy) {
  gfx += gphix;
  gfy += gphiy;
  phi_bwd(p, g, t.x, gphix, gfx, gfy);
  phi_bwd(p, g, t.y, gphiy, gfy, gfx);
}

std::pair<FeatureField, FeatureField> transformer_fuse(const FeatureField& fx, const FeatureField& fy,
                                                       const DescriptorParams& params) {
  FuseTrace t;
  return fuse_fwd(params.fuse, fx, fy, t);
}

std::pair<FeatureField, FeatureField> describe_fwd(const PointCloud& source, const PointCloud& target,
                                                   const DescriptorParams& params, DescribeTrace& t) {
  source.validate();
  target.validate();
  const RMat px = cloud_matrix(source);
  const RMat py = cloud_matrix(target);
  const Eigen::Matrix3d mx = align_fwd(params.align, px, t.align_x);
  const Eigen::Matrix3d my = align_fwd(params.align, py, t.align_y);
  t.aligned_x = px * mx.transpose();
  t.aligned_y = py * my.transpose();
  const RMat fx = edge_stack_fwd(params, t.aligned_x, t.edge_x);
  const RMat fy = edge_stack_fwd(params, t.aligned_y, t.edge_y);
  return fuse_fwd(params.fuse, fx, fy, t.fuse);
}

void describe_bwd(const DescriptorParams& params, DescriptorParams& grads, const DescribeTrace& t,
                  const RMat& gphix, const RMat& gphiy) {
  RMat gfx = RMat::Zero(gphix.rows(), gphix.cols());
  RMat gfy = RMat::Zero(gphiy.rows(), gphiy.cols());
  fuse_bwd(params.fuse, grads.fuse, t.fuse, gphix, gphiy, gfx, gfy);
  const RMat gax = edge_stack_bwd(params, grads, t.edge_x, gfx);
  const RMat gay = edge_stack_bwd(params, grads, t.edge_y, gfy);
  const Eigen::Matrix3d gmx = gax.transpose() * t.align_x.input;
  const Eigen::Matrix3d gmy = gay.transpose() * t.align_y.input;
  align_bwd(params.align, grads.align, t.align_x, gmx);
  align_bwd(params.align, grads.align, t.align_y, gmy);
}

std::pair<FeatureField, FeatureField> describe(const PointCloud& source, const PointCloud& target,
                                               const DescriptorParams& params) {
  DescribeTrace t;
  return describe_fwd(source, target, params, t);
}

void save_params(const DescriptorParams& params, const std::filesystem::path& path) {
  ArrayStore store;
  store.meta["kind"] = "descriptor-params";
  store.meta["config"] = params.cfg;
  for (const auto& t : params.tensors()) {
    Eigen::MatrixXd flat(1, t.size);
    std::copy(t.data, t.data + t.size, flat.data());
    store.arrays.emplace_back(t.name, std::move(flat));
  }
  write_arrays(store, path);
}

DescriptorParams load_params(const std::filesystem::path& path) {
  const ArrayStore store = read_arrays(path);
  if (store.meta.value("kind", "") != "descriptor-params")
    throw FormatError(path.string() + ": not a descriptor checkpoint");
  DescriptorConfig cfg;
  try {
    cfg = store.meta.at("config").get<DescriptorConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad config block: " + e.what());
  }
  DescriptorParams params = DescriptorParams::init(cfg, 0);
  for (auto& t : params.tensors()) {
    const Eigen::MatrixXd* arr = store.find(t.name);
    if (!arr) throw FormatError(path.string() + ": missing tensor '" + t.name + "'");
    if (arr->size() != t.size)
      throw CompatibilityError(path.string() + ": tensor '" + t.name + "' has wrong size");
    std::copy(arr->data(), arr->data() + t.size, t.data);
  }
  return params;
}

}  // namespace defreg
