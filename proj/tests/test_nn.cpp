#include <doctest.h>

#include <functional>

#include "defreg/geometry.hpp"
#include "defreg/nn.hpp"
#include "defreg/rng.hpp"
#include "oracles.hpp"

using namespace defreg;

namespace {

// Central finite differences over every entry of `x`, compared against the
// analytic gradient produced by `backward`. `f` returns a scalar.
void check_grad(RMat& x, const RMat& analytic, const std::function<double()>& f,
                double h = 1e-6, double tol = 1e-5) {
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double keep = x(i, j);
      x(i, j) = keep + h;
      const double up = f();
      x(i, j) = keep - h;
      const double down = f();
      x(i, j) = keep;
      const double fd = (up - down) / (2.0 * h);
      const double err = std::abs(fd - analytic(i, j)) /
                         std::max({std::abs(fd), std::abs(analytic(i, j)), 1e-4});
      CHECK(err < tol);
    }
}

RMat row_grad(Eigen::RowVectorXd& v, const std::function<double()>& f, double h = 1e-6) {
  RMat out(1, v.size());
  for (Eigen::Index j = 0; j < v.size(); ++j) {
    const double keep = v[j];
    v[j] = keep + h;
    const double up = f();
    v[j] = keep - h;
    const double down = f();
    v[j] = keep;
    out(0, j) = (up - down) / (2.0 * h);
  }
  return out;
}

}  // namespace

TEST_CASE("linear layer forward and gradients") {
  auto rng = make_rng(1);
  Linear lin;
  lin.init_xavier(4, 3, true, rng);
  RMat x = oracle::random_mat(5, 4, rng);
  const RMat weight = oracle::random_mat(5, 3, rng);

  LinearCache cache;
  const RMat y = linear_fwd(lin, x, cache);
  for (Eigen::Index i = 0; i < 5; ++i)
    for (Eigen::Index j = 0; j < 3; ++j) {
      double expect = lin.b[j];
      for (Eigen::Index c = 0; c < 4; ++c) expect += x(i, c) * lin.W(c, j);
      CHECK(y(i, j) == doctest::Approx(expect).epsilon(1e-12));
    }

  auto loss = [&] {
    LinearCache c;
    return (linear_fwd(lin, x, c).array() * weight.array()).sum();
  };
  Linear g;
  g.W = RMat::Zero(4, 3);
  g.b = Eigen::RowVectorXd::Zero(3);
  const RMat gx = linear_bwd(lin, g, cache, weight);
  check_grad(x, gx, loss);
  check_grad(lin.W, g.W, loss);
  const RMat gb_fd = row_grad(lin.b, loss);
  CHECK((gb_fd - g.b).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("relu forward and masked backward") {
  RMat x(2, 3);
  x << -1, 0, 2, 3, -0.5, 0.25;
  const RMat y = relu_fwd(x);
  CHECK(y(0, 0) == 0.0);
  CHECK(y(0, 2) == 2.0);
  CHECK(y(1, 1) == 0.0);
  RMat gy = RMat::Ones(2, 3);
  const RMat gx = relu_bwd(x, gy);
  CHECK(gx(0, 0) == 0.0);
  CHECK(gx(0, 1) == 0.0);  // flat at exactly zero
  CHECK(gx(0, 2) == 1.0);
}

TEST_CASE("instance norm standardizes columns and backpropagates") {
  auto rng = make_rng(2);
  InstanceNorm norm;
  norm.init(4);
  RMat x = oracle::random_mat(12, 4, rng, 2.0);

  InstanceNormCache cache;
  const RMat y = instnorm_fwd(norm, x, cache);
  for (Eigen::Index c = 0; c < 4; ++c) {
    CHECK(std::abs(y.col(c).mean()) < 1e-12);
    const double var = y.col(c).squaredNorm() / 12.0;
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));  // biased variance with eps
  }

  RMat one_row(1, 4);
  InstanceNormCache c1;
  CHECK_THROWS_AS(instnorm_fwd(norm, one_row, c1), DimensionError);

  norm.gamma = Eigen::RowVectorXd::LinSpaced(4, 0.5, 2.0);
  norm.beta = Eigen::RowVectorXd::LinSpaced(4, -0.2, 0.4);
  const RMat weight = oracle::random_mat(12, 4, rng);
  auto loss = [&] {
    InstanceNormCache c;
    return (instnorm_fwd(norm, x, c).array() * weight.array()).sum();
  };
  InstanceNormCache cache2;
  instnorm_fwd(norm, x, cache2);
  InstanceNorm g;
  g.gamma = Eigen::RowVectorXd::Zero(4);
  g.beta = Eigen::RowVectorXd::Zero(4);
  const RMat gx = instnorm_bwd(norm, g, cache2, weight);
  check_grad(x, gx, loss);
  CHECK((row_grad(norm.gamma, loss) - g.gamma).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((row_grad(norm.beta, loss) - g.beta).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("layer norm standardizes rows and backpropagates") {
  auto rng = make_rng(3);
  LayerNorm norm;
  norm.init(6);
  RMat x = oracle::random_mat(5, 6, rng, 2.0);

  LayerNormCache cache;
  const RMat y = layernorm_fwd(norm, x, cache);
  for (Eigen::Index i = 0; i < 5; ++i) {
    CHECK(std::abs(y.row(i).mean()) < 1e-12);
    CHECK(y.row(i).squaredNorm() / 6.0 == doctest::Approx(1.0).epsilon(1e-3));
  }

  norm.gamma = Eigen::RowVectorXd::LinSpaced(6, 0.5, 1.5);
  norm.beta = Eigen::RowVectorXd::LinSpaced(6, -0.1, 0.1);
  const RMat weight = oracle::random_mat(5, 6, rng);
  auto loss = [&] {
    LayerNormCache c;
    return (layernorm_fwd(norm, x, c).array() * weight.array()).sum();
  };
  LayerNormCache cache2;
  layernorm_fwd(norm, x, cache2);
  LayerNorm g;
  g.gamma = Eigen::RowVectorXd::Zero(6);
  g.beta = Eigen::RowVectorXd::Zero(6);
  const RMat gx = layernorm_bwd(norm, g, cache2, weight);
  check_grad(x, gx, loss);
  CHECK((row_grad(norm.gamma, loss) - g.gamma).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((row_grad(norm.beta, loss) - g.beta).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("softmax rows sum to one and match a shifted-exp evaluation") {
  auto rng = make_rng(4);
  RMat x = oracle::random_mat(7, 5, rng, 30.0);  // large logits stay stable
  const RMat y = softmax_rows(x);
  for (Eigen::Index i = 0; i < 7; ++i) CHECK(std::abs(y.row(i).sum() - 1.0) < 1e-9);
  CHECK((y.array() > 0.0).all());

  RMat two(1, 2);
  two << 0.0, std::log(3.0);
  const RMat p = softmax_rows(two);
  CHECK(p(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(p(0, 1) == doctest::Approx(0.75).epsilon(1e-12));

  RMat xs = oracle::random_mat(3, 4, rng);
  const RMat weight = oracle::random_mat(3, 4, rng);
  auto loss = [&] { return (softmax_rows(xs).array() * weight.array()).sum(); };
  const RMat ys = softmax_rows(xs);
  const RMat gx = softmax_rows_bwd(ys, weight);
  check_grad(xs, gx, loss);
}

TEST_CASE("attention matches the direct scaled-softmax evaluation") {
  auto rng = make_rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<int> dim(1, 9);
    const int n = dim(rng) + 1, m = dim(rng) + 1, d = dim(rng), dv = dim(rng);
    const RMat q = oracle::random_mat(n, d, rng);
    const RMat k = oracle::random_mat(m, d, rng);
    const RMat v = oracle::random_mat(m, dv, rng);
    AttnCache cache;
    const RMat ours = attention_fwd(q, k, v, cache);
    CHECK(oracle::max_rel_err(ours, oracle::attention(q, k, v), 1e-9) < 1e-6);
    for (Eigen::Index i = 0; i < cache.A.rows(); ++i)
      CHECK(std::abs(cache.A.row(i).sum() - 1.0) < 1e-9);
  }

  RMat mismatched_k = oracle::random_mat(4, 3, rng);
  RMat q = oracle::random_mat(2, 5, rng), v = oracle::random_mat(4, 3, rng);
  AttnCache cache;
  CHECK_THROWS_AS(attention_fwd(q, mismatched_k, v, cache), DimensionError);
}

TEST_CASE("attention gradients match finite differences") {
  auto rng = make_rng(6);
  RMat q = oracle::random_mat(4, 3, rng);
  RMat k = oracle::random_mat(5, 3, rng);
  RMat v = oracle::random_mat(5, 2, rng);
  const RMat weight = oracle::random_mat(4, 2, rng);
  auto loss = [&] {
    AttnCache c;
    return (attention_fwd(q, k, v, c).array() * weight.array()).sum();
  };
  AttnCache cache;
  attention_fwd(q, k, v, cache);
  RMat gq = RMat::Zero(4, 3), gk = RMat::Zero(5, 3), gv = RMat::Zero(5, 2);
  attention_bwd(cache, weight, gq, gk, gv);
  check_grad(q, gq, loss);
  check_grad(k, gk, loss);
  check_grad(v, gv, loss);
}

TEST_CASE("multi-head attention reduces to plain attention for one identity head") {
  auto rng = make_rng(7);
  Mha mha;
  mha.init(4, 1, rng);
  mha.wq.W = RMat::Identity(4, 4);
  mha.wk.W = RMat::Identity(4, 4);
  mha.wv.W = RMat::Identity(4, 4);
  mha.wo.W = RMat::Identity(4, 4);
  const RMat xq = oracle::random_mat(6, 4, rng);
  const RMat xkv = oracle::random_mat(5, 4, rng);
  MhaCache cache;
  const RMat ours = mha_fwd(mha, xq, xkv, cache);
  AttnCache plain;
  const RMat expect = attention_fwd(xq, xkv, xkv, plain);
  CHECK(oracle::max_rel_err(ours, expect, 1e-9) < 1e-12);
}

TEST_CASE("multi-head attention equals per-head slicing oracle") {
  auto rng = make_rng(8);
  const int d = 8, heads = 2, hd = d / heads;
  Mha mha;
  mha.init(d, heads, rng);
  const RMat xq = oracle::random_mat(5, d, rng);
  const RMat xkv = oracle::random_mat(7, d, rng);
  MhaCache cache;
  const RMat ours = mha_fwd(mha, xq, xkv, cache);

  const RMat q = xq * mha.wq.W, k = xkv * mha.wk.W, v = xkv * mha.wv.W;
  RMat concat(5, d);
  for (int h = 0; h < heads; ++h)
    concat.middleCols(h * hd, hd) = oracle::attention(q.middleCols(h * hd, hd).eval(),
                                                      k.middleCols(h * hd, hd).eval(),
                                                      v.middleCols(h * hd, hd).eval());
  CHECK(oracle::max_rel_err(ours, concat * mha.wo.W, 1e-9) < 1e-6);

  Mha bad;
  CHECK_THROWS_AS(bad.init(6, 4, rng), ConfigError);
}

TEST_CASE("multi-head attention gradients, including aliased inputs") {
  auto rng = make_rng(9);
  const int d = 6;
  Mha mha;
  mha.init(d, 3, rng);
  RMat xq = oracle::random_mat(4, d, rng);
  RMat xkv = oracle::random_mat(5, d, rng);
  const RMat weight = oracle::random_mat(4, d, rng);
  auto loss = [&] {
    MhaCache c;
    return (mha_fwd(mha, xq, xkv, c).array() * weight.array()).sum();
  };
  MhaCache cache;
  mha_fwd(mha, xq, xkv, cache);
  Mha g;
  g.init(d, 3, rng);
  g.wq.W.setZero();
  g.wk.W.setZero();
  g.wv.W.setZero();
  g.wo.W.setZero();
  RMat gxq = RMat::Zero(4, d), gxkv = RMat::Zero(5, d);
  mha_bwd(mha, g, cache, weight, gxq, gxkv);
  check_grad(xq, gxq, loss);
  check_grad(xkv, gxkv, loss);
  check_grad(mha.wq.W, g.wq.W, loss);
  check_grad(mha.wo.W, g.wo.W, loss);

  // self-attention: query and key/value gradients accumulate into one matrix
  RMat x = oracle::random_mat(4, d, rng);
  const RMat w2 = oracle::random_mat(4, d, rng);
  auto self_loss = [&] {
    MhaCache c;
    return (mha_fwd(mha, x, x, c).array() * w2.array()).sum();
  };
  MhaCache cache2;
  mha_fwd(mha, x, x, cache2);
  RMat gx = RMat::Zero(4, d);
  mha_bwd(mha, g, cache2, w2, gx, gx);
  check_grad(x, gx, self_loss);
}

TEST_CASE("edge convolution matches the per-edge loop") {
  auto rng = make_rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<int> size(6, 14);
    const int n = size(rng), k = 3, in = 4, out = 5;
    EdgeLayer layer;
    layer.init(in, out, rng);
    const RMat feat = oracle::random_mat(n, in, rng);
    const Eigen::MatrixXi idx = knn_indices_self_excluded(feat, k);
    EdgeConvCache cache;
    const RMat ours = edgeconv_fwd(layer, feat, idx, cache);
    CHECK(oracle::max_rel_err(ours, oracle::edgeconv(feat, idx, layer.theta, layer.phi), 1e-9) <
          1e-6);
  }
}

TEST_CASE("edge convolution is invariant to neighbor-list order") {
  auto rng = make_rng(11);
  EdgeLayer layer;
  layer.init(3, 6, rng);
  const RMat feat = oracle::random_mat(10, 3, rng);
  Eigen::MatrixXi idx = knn_indices_self_excluded(feat, 4);
  EdgeConvCache c1, c2;
  const RMat before = edgeconv_fwd(layer, feat, idx, c1);
  for (Eigen::Index i = 0; i < idx.rows(); ++i)
    idx.row(i) = idx.row(i).reverse().eval();
  const RMat after = edgeconv_fwd(layer, feat, idx, c2);
  CHECK((before.array() == after.array()).all());
}

TEST_CASE("edge convolution gradients match finite differences") {
  auto rng = make_rng(12);
  EdgeLayer layer;
  layer.init(3, 4, rng);
  RMat feat = oracle::random_mat(8, 3, rng);
  const Eigen::MatrixXi idx = knn_indices_self_excluded(feat, 3);
  const RMat weight = oracle::random_mat(8, 4, rng);
  auto loss = [&] {
    EdgeConvCache c;
    return (edgeconv_fwd(layer, feat, idx, c).array() * weight.array()).sum();
  };
  EdgeConvCache cache;
  edgeconv_fwd(layer, feat, idx, cache);
  EdgeLayer g;
  g.theta = RMat::Zero(3, 4);
  g.phi = RMat::Zero(3, 4);
  const RMat gfeat = edgeconv_bwd(layer, g, cache, weight);
  check_grad(feat, gfeat, loss);
  check_grad(layer.theta, g.theta, loss);
  check_grad(layer.phi, g.phi, loss);
}

TEST_CASE("global max pooling forwards the column maxima and routes gradients") {
  RMat x(3, 2);
  x << 1, 5, 4, 2, 3, 3;
  std::vector<int> argmax;
  const Eigen::RowVectorXd pooled = maxpool_fwd(x, argmax);
  CHECK(pooled[0] == 4.0);
  CHECK(pooled[1] == 5.0);
  CHECK(argmax[0] == 1);
  CHECK(argmax[1] == 0);
  Eigen::RowVectorXd gy(2);
  gy << 10, 20;
  const RMat gx = maxpool_bwd(3, argmax, gy);
  CHECK(gx(1, 0) == 10.0);
  CHECK(gx(0, 1) == 20.0);
  CHECK(gx.sum() == 30.0);
}
