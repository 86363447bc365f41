#include "defreg/nn.hpp"

#include <cmath>

namespace defreg {

void Linear::init_xavier(Eigen::Index in, Eigen::Index out, bool bias, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-bound, bound);
  W.resize(in, out);
  for (Eigen::Index r = 0; r < in; ++r)
    for (Eigen::Index c = 0; c < out; ++c) W(r, c) = u(rng);
  if (bias)
    b = Eigen::RowVectorXd::Zero(out);
  else
    b.resize(0);
}

void Linear::collect(const std::string& prefix, std::vector<TensorRef>& out) {
  out.push_back({prefix + ".W", W.data(), W.size()});
  if (b.size() > 0) out.push_back({prefix + ".b", b.data(), b.size()});
}

RMat linear_fwd(const Linear& p, const RMat& x, LinearCache& cache) {
  if (x.cols() != p.W.rows()) throw DimensionError("linear: input width mismatch");
  cache.x = x;
  RMat y = x * p.W;
  if (p.b.size() > 0) y.rowwise() += p.b;
  return y;
}

RMat linear_bwd(const Linear& p, Linear& g, const LinearCache& cache, const RMat& gy) {
  g.W.noalias() += cache.x.transpose() * gy;
  if (p.b.size() > 0) g.b += gy.colwise().sum();
  return gy * p.W.transpose();
}

RMat relu_fwd(const RMat& x) { return x.cwiseMax(0.0); }

RMat relu_bwd(const RMat& x, const RMat& gy) {
  return (x.array() > 0.0).select(gy, RMat::Zero(gy.rows(), gy.cols()));
}

void InstanceNorm::init(Eigen::Index width) {
  gamma = Eigen::RowVectorXd::Ones(width);
  beta = Eigen::RowVectorXd::Zero(width);
}

void InstanceNorm::collect(const std::string& prefix, std::vector<TensorRef>& out) {
  out.push_back({prefix + ".gamma", gamma.data(), gamma.size()});
  out.push_back({prefix + ".beta", beta.data(), beta.size()});
}

RMat instnorm_fwd(const InstanceNorm& p, const RMat& x, InstanceNormCache& cache) {
  if (x.rows() < 2) throw DimensionError("instance norm needs at least 2 rows");
  if (x.cols() != p.gamma.size()) throw DimensionError("instance norm: width mismatch");
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const RMat centered = x.rowwise() - mu;
  const Eigen::RowVectorXd var = centered.array().square().colwise().mean();
  cache.inv_std = (var.array() + kNormEps).rsqrt();
  cache.xhat = centered.array().rowwise() * cache.inv_std.array();
  RMat y = cache.xhat.array().rowwise() * p.gamma.array();
  y.array().rowwise() += p.beta.array();
  return y;
}

RMat instnorm_bwd(const InstanceNorm& p, InstanceNorm& g, const InstanceNormCache& cache, const RMat& gy) {
  const double n = static_cast<double>(gy.rows());
  g.gamma += (gy.array() * cache.xhat.array()).colwise().sum().matrix();
  g.beta += gy.colwise().sum();
  const RMat gxhat = gy.array().rowwise() * p.gamma.array();
  const Eigen::RowVectorXd mean_g = gxhat.colwise().sum() / n;
  const Eigen::RowVectorXd mean_gx = (gxhat.array() * cache.xhat.array()).colwise().sum() / n;
  RMat gx = gxhat;
  gx.array().rowwise() -= mean_g.array();
  gx.array() -= cache.xhat.array().rowwise() * mean_gx.array();
  gx.array().rowwise() *= cache.inv_std.array();
  return gx;
}

void LayerNorm::init(Eigen::Index width) {
  gamma = Eigen::RowVectorXd::Ones(width);
  beta = Eigen::RowVectorXd::Zero(width);
}

void LayerNorm::collect(const std::string& prefix, std::vector<TensorRef>& out) {
  out.push_back({prefix + ".gamma", gamma.data(), gamma.size()});
  out.push_back({prefix + ".beta", beta.data(), beta.size()});
}

RMat layernorm_fwd(const LayerNorm& p, const RMat& x, LayerNormCache& cache) {
  if (x.cols() != p.gamma.size()) throw DimensionError("layer norm: width mismatch");
  const Eigen::VectorXd mu = x.rowwise().mean();
  const RMat centered = x.colwise() - mu;
  const Eigen::VectorXd var = centered.array().square().rowwise().mean();
  cache.inv_std = (var.array() + kNormEps).rsqrt();
  cache.xhat = centered.array().colwise() * cache.inv_std.array();
  RMat y = cache.xhat.array().rowwise() * p.gamma.array();
  y.array().rowwise() += p.beta.array();
  return y;
}

RMat layernorm_bwd(const LayerNorm& p, LayerNorm& g, const LayerNormCache& cache, const RMat& gy) {
  const double d = static_cast<double>(gy.cols());
  g.gamma += (gy.array() * cache.xhat.array()).colwise().sum().matrix();
  g.beta += gy.colwise().sum();
  const RMat gxhat = gy.array().rowwise() * p.gamma.array();
  const Eigen::VectorXd mean_g = gxhat.rowwise().sum() / d;
  const Eigen::VectorXd mean_gx = (gxhat.array() * cache.xhat.array()).rowwise().sum() / d;
  RMat gx = gxhat;
  gx.array().colwise() -= mean_g.array();
  gx.array() -= cache.xhat.array().colwise() * mean_gx.array();
  gx.array().colwise() *= cache.inv_std.array();
  return gx;
}

RMat softmax_rows(const RMat& x) {
  const Eigen::VectorXd row_max = x.rowwise().maxCoeff();
  RMat y = (x.colwise() - row_max).array().exp();
  const Eigen::VectorXd sums = y.rowwise().sum();
  y.array().colwise() /= sums.array();
  return y;
}

RMat softmax_rows_bwd(const RMat& y, const RMat& gy) {
  const Eigen::VectorXd dot = (y.array() * gy.array()).rowwise().sum();
  return y.array() * (gy.colwise() - dot).array();
}

RMat attention_fwd(const RMat& Q, const RMat& K, const RMat& V, AttnCache& cache) {
  if (Q.cols() != K.cols()) throw DimensionError("attention: query/key width mismatch");
  if (K.rows() != V.rows()) throw DimensionError("attention: key/value row mismatch");
  const double scale = 1.0 / std::sqrt(static_cast<double>(Q.cols()));
  cache.Q = Q;
  cache.K = K;
  cache.V = V;
  cache.A = softmax_rows(Q * K.transpose() * scale);
  return cache.A * V;
}

void attention_bwd(const AttnCache& cache, const RMat& gO, RMat& gQ, RMat& gK, RMat& gV) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(cache.Q.cols()));
  const RMat gA = gO * cache.V.transpose();
  gV = cache.A.transpose() * gO;
  const RMat gS = softmax_rows_bwd(cache.A, gA) * scale;
  gQ = gS * cache.K;
  gK = gS.transpose() * cache.Q;
}

void Mha::init(Eigen::Index d_model, int h, std::mt19937_64& rng) {
  if (h < 1 || d_model % h != 0) throw ConfigError("multi-head: d_model must be divisible by heads");
  heads = h;
  wq.init_xavier(d_model, d_model, false, rng);
  wk.init_xavier(d_model, d_model, false, rng);
  wv.init_xavier(d_model, d_model, false, rng);
  wo.init_xavier(d_model, d_model, false, rng);
}

void Mha::collect(const std::string& prefix, std::vector<TensorRef>& out) {
  wq.collect(prefix + ".wq", out);
  wk.collect(prefix + ".wk", out);
  wv.collect(prefix + ".wv", out);
  wo.collect(prefix + ".wo", out);
}

RMat mha_fwd(const Mha& p, const RMat& xq, const RMat& xkv, MhaCache& cache) {
  const Eigen::Index d_model = p.wq.W.rows();
  if (xq.cols() != d_model || xkv.cols() != d_model) throw DimensionError("multi-head: input width mismatch");
  if (d_model % p.heads != 0) throw ConfigError("multi-head: d_model must be divisible by heads");
  const Eigen::Index dk = d_model / p.heads;

  const RMat Q = linear_fwd(p.wq, xq, cache.cq);
  const RMat K = linear_fwd(p.wk, xkv, cache.ck);
  const RMat V = linear_fwd(p.wv, xkv, cache.cv);

  RMat concat(xq.rows(), d_model);
  cache.head.assign(static_cast<std::size_t>(p.heads), AttnCache{});
  for (int h = 0; h < p.heads; ++h) {
    concat.middleCols(h * dk, dk) =
        attention_fwd(Q.middleCols(h * dk, dk), K.middleCols(h * dk, dk), V.middleCols(h * dk, dk),
                      cache.head[static_cast<std::size_t>(h)]);
  }
  return linear_fwd(p.wo, concat, cache.co);
}

void mha_bwd(const Mha& p, Mha& g, const MhaCache& cache, const RMat& gy, RMat& gxq, RMat& gxkv) {
  const Eigen::Index d_model = p.wq.W.rows();
  const Eigen::Index dk = d_model / p.heads;
  const RMat gconcat = linear_bwd(p.wo, g.wo, cache.co, gy);

  RMat gQ(gy.rows(), d_model), gK(cache.ck.x.rows(), d_model), gV(cache.cv.x.rows(), d_model);
  for (int h = 0; h < p.heads; ++h) {
    RMat gq, gk, gv;
    attention_bwd(cache.head[static_cast<std::size_t>(h)], gconcat.middleCols(h * dk, dk), gq, gk, gv);
    gQ.middleCols(h * dk, dk) = gq;
    gK.middleCols(h * dk, dk) = gk;
    gV.middleCols(h * dk, dk) = gv;
  }
  gxq += linear_bwd(p.wq, g.wq, cache.cq, gQ);
  gxkv += linear_bwd(p.wk, g.wk, cache.ck, gK);
  gxkv += linear_bwd(p.wv, g.wv, cache.cv, gV);
}

void EdgeLayer::init(Eigen::Index in, Eigen::Index out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-bound, bound);
  theta.resize(in, out);
  phi.resize(in, out);
  for (Eigen::Index r = 0; r < in; ++r)
    for (Eigen::Index c = 0; c < out; ++c) theta(r, c) = u(rng);
  for (Eigen::Index r = 0; r < in; ++r)
    for (Eigen::Index c = 0; c < out; ++c) phi(r, c) = u(rng);
}

void EdgeLayer::collect(const std::string& prefix, std::vector<TensorRef>& out) {
  out.push_back({prefix + ".theta", theta.data(), theta.size()});
  out.push_back({prefix + ".phi", phi.data(), phi.size()});
}

RMat edgeconv_fwd(const EdgeLayer& p, const RMat& feat, const Eigen::MatrixXi& idx, EdgeConvCache& cache) {
  const Eigen::Index n = feat.rows();
  const Eigen::Index k = idx.cols();
  const Eigen::Index in = feat.cols();
  const Eigen::Index out = p.theta.cols();
  if (idx.rows() != n) throw DimensionError("edgeconv: neighbor index rows mismatch");
  if (p.theta.rows() != in || p.phi.rows() != in) throw DimensionError("edgeconv: input width mismatch");
  if (idx.size() > 0 && (idx.minCoeff() < 0 || idx.maxCoeff() >= n))
    throw DimensionError("edgeconv: neighbor index out of range");

  RMat diff(n * k, in), center(n * k, in);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index s = 0; s < k; ++s) {
      diff.row(i * k + s) = feat.row(idx(i, s)) - feat.row(i);
      center.row(i * k + s) = feat.row(i);
    }
  }
  cache.feat = feat;
  cache.idx = idx;
  cache.pre.noalias() = diff * p.theta;
  cache.pre.noalias() += center * p.phi;

  RMat y(n, out);
  cache.argmax.resize(n, out);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index l = 0; l < out; ++l) {
      double best = -1.0;
      Eigen::Index best_s = 0;
      for (Eigen::Index s = 0; s < k; ++s) {
        const double a = cache.pre(i * k + s, l);
        if (a > best) {
          best = a;
          best_s = s;
        }
      }
      y(i, l) = best > 0.0 ? best : 0.0;
      cache.argmax(i, l) = static_cast<int>(best_s);
    }
  }
  return y;
}

RMat edgeconv_bwd(const EdgeLayer& p, EdgeLayer& g, const EdgeConvCache& cache, const RMat& gy) {
  const Eigen::Index n = cache.feat.rows();
  const Eigen::Index k = cache.idx.cols();
  const Eigen::Index in = cache.feat.cols();
  const Eigen::Index out = p.theta.cols();

  RMat gpre = RMat::Zero(n * k, out);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index l = 0; l < out; ++l) {
      const Eigen::Index e = i * k + cache.argmax(i, l);
      if (cache.pre(e, l) > 0.0) gpre(e, l) = gy(i, l);
    }
  }

  // rebuild the edge inputs instead of caching them (they are cheap)
  RMat diff(n * k, in), center(n * k, in);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index s = 0; s < k; ++s) {
      diff.row(i * k + s) = cache.feat.row(cache.idx(i, s)) - cache.feat.row(i);
      center.row(i * k + s) = cache.feat.row(i);
    }
  }
  g.theta.noalias() += diff.transpose() * gpre;
  g.phi.noalias() += center.transpose() * gpre;

  const RMat gdiff = gpre * p.theta.transpose();
  const RMat gcenter = gpre * p.phi.transpose();
  RMat gfeat = RMat::Zero(n, in);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index s = 0; s < k; ++s) {
      const Eigen::Index e = i * k + s;
      gfeat.row(cache.idx(i, s)) += gdiff.row(e);
      gfeat.row(i) += gcenter.row(e) - gdiff.row(e);
    }
  }
  return gfeat;
}

Eigen::RowVectorXd maxpool_fwd(const RMat& x, std::vector<int>& argmax) {
  if (x.rows() < 1) throw DimensionError("maxpool: empty input");
  argmax.assign(static_cast<std::size_t>(x.cols()), 0);
  Eigen::RowVectorXd y(x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    Eigen::Index r;
    y[c] = x.col(c).maxCoeff(&r);
    argmax[static_cast<std::size_t>(c)] = static_cast<int>(r);
  }
  return y;
}

RMat maxpool_bwd(Eigen::Index rows, const std::vector<int>& argmax, const Eigen::RowVectorXd& gy) {
  RMat gx = RMat::Zero(rows, gy.size());
  for (Eigen::Index c = 0; c < gy.size(); ++c) gx(argmax[static_cast<std::size_t>(c)], c) = gy[c];
  return gx;
}

}  // namespace defreg
