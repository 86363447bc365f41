#include "defreg/solver.hpp"

#include <algorithm>
#include <cmath>

namespace defreg {

void SolverConfig::validate() const {
  if (k_cand < 1) throw ConfigError("k_cand must be positive");
  if (k_reg < 1) throw ConfigError("k_reg must be positive");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be nonnegative");
  if (lbp_iterations < 0) throw ConfigError("lbp_iterations must be nonnegative");
  if (!(softmax_temperature > 0.0)) throw ConfigError("softmax_temperature must be positive");
  if (!(softmin_temperature >= 0.0)) throw ConfigError("softmin_temperature must be nonnegative");
}

void to_json(nlohmann::json& j, const SolverConfig& c) {
  j = nlohmann::json{{"k_cand", c.k_cand},
                     {"k_reg", c.k_reg},
                     {"alpha", c.alpha},
                     {"lbp_iterations", c.lbp_iterations},
                     {"softmax_temperature", c.softmax_temperature},
                     {"softmin_temperature", c.softmin_temperature}};
}

void from_json(const nlohmann::json& j, SolverConfig& c) {
  c = SolverConfig{};
  if (j.contains("k_cand")) j.at("k_cand").get_to(c.k_cand);
  if (j.contains("k_reg")) j.at("k_reg").get_to(c.k_reg);
  if (j.contains("alpha")) j.at("alpha").get_to(c.alpha);
  if (j.contains("lbp_iterations")) j.at("lbp_iterations").get_to(c.lbp_iterations);
  if (j.contains("softmax_temperature")) j.at("softmax_temperature").get_to(c.softmax_temperature);
  if (j.contains("softmin_temperature")) j.at("softmin_temperature").get_to(c.softmin_temperature);
}

void build_edge_structure(CandidateSet& cs, int n, int k,
                          const std::vector<std::pair<int, int>>& undirected) {
  std::vector<std::pair<int, int>> uniq;
  uniq.reserve(undirected.size());
  for (auto [a, b] : undirected) {
    if (a == b) continue;
    if (a < 0 || b < 0 || a >= n || b >= n) throw DimensionError("edge endpoint out of range");
    uniq.emplace_back(std::min(a, b), std::max(a, b));
  }
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());

  cs.edges.clear();
  cs.reverse_edge.clear();
  cs.in_edges.assign(static_cast<std::size_t>(n), {});
  for (auto [a, b] : uniq) {
    const int e_ab = static_cast<int>(cs.edges.size());
    cs.edges.emplace_back(a, b);
    cs.edges.emplace_back(b, a);
    cs.reverse_edge.push_back(e_ab + 1);
    cs.reverse_edge.push_back(e_ab);
    cs.in_edges[static_cast<std::size_t>(b)].push_back(e_ab);
    cs.in_edges[static_cast<std::size_t>(a)].push_back(e_ab + 1);
  }
  cs.messages = RMat::Zero(cs.edge_count(), k);
}

CandidateSet build_candidates(const PointCloud& source, const PointCloud& target,
                              const SolverConfig& cfg) {
  cfg.validate();
  source.validate();
  target.validate();
  const Eigen::Index n = source.size();
  if (cfg.k_cand > target.size()) throw ConfigError("k_cand exceeds target size");
  if (cfg.k_reg >= n) throw ConfigError("k_reg must be smaller than the source size");

  CandidateSet cs;
  cs.candidates = knn_indices(source, target, cfg.k_cand);
  cs.source_graph = knn_indices_self_excluded(source.points, cfg.k_reg);

  const Eigen::Index k = cfg.k_cand;
  cs.disp.resize(n * k, 3);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index p = 0; p < k; ++p)
      cs.disp.row(i * k + p) = target.points.row(cs.candidates(i, p)) - source.points.row(i);

  std::vector<std::pair<int, int>> undirected;
  undirected.reserve(static_cast<std::size_t>(n * cfg.k_reg));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index s = 0; s < cs.source_graph.cols(); ++s)
      undirected.emplace_back(static_cast<int>(i), cs.source_graph(i, s));
  build_edge_structure(cs, static_cast<int>(n), static_cast<int>(k), undirected);

  cs.pair_cost.resize(static_cast<std::size_t>(cs.edge_count()));
  for (Eigen::Index e = 0; e < cs.edge_count(); ++e) {
    const auto [i, j] = cs.edges[static_cast<std::size_t>(e)];
    RMat pc(k, k);
    for (Eigen::Index p = 0; p < k; ++p)
      for (Eigen::Index q = 0; q < k; ++q)
        pc(p, q) = (cs.disp.row(i * k + p) - cs.disp.row(j * k + q)).squaredNorm();
    cs.pair_cost[static_cast<std::size_t>(e)] = std::move(pc);
  }
  return cs;
}

RMat unary_costs(const FeatureField& fx, const FeatureField& fy, const CandidateSet& cs) {
  const Eigen::Index n = cs.n(), k = cs.k();
  if (fx.rows() != n) throw DimensionError("unary_costs: feature rows do not match source size");
  if (fx.cols() != fy.cols()) throw DimensionError("unary_costs: feature width mismatch");
  if (cs.candidates.size() > 0 && cs.candidates.maxCoeff() >= fy.rows())
    throw DimensionError("unary_costs: candidate index outside target features");
  RMat unary(n, k);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index p = 0; p < k; ++p)
      unary(i, p) = (fx.row(i) - fy.row(cs.candidates(i, p))).squaredNorm();
  return unary;
}

double pairwise_cost(const Eigen::Vector3d& xi, const Eigen::Vector3d& xj, const Eigen::Vector3d& cip,
                     const Eigen::Vector3d& cjq) {
  return ((cip - xi) - (cjq - xj)).squaredNorm();
}

void reset_messages(CandidateSet& cs) { cs.messages = RMat::Zero(cs.edge_count(), cs.k()); }

void lbp_sweep(CandidateSet& cs, const SolverConfig& cfg, bool normalize, SweepRecord* record) {
  const Eigen::Index n = cs.n(), k = cs.k(), e_count = cs.edge_count();
  if (cs.unary.rows() != n || cs.unary.cols() != k) throw StateError("lbp_sweep: unary costs not set");
  if (cs.messages.rows() != e_count || cs.messages.cols() != k)
    throw StateError("lbp_sweep: messages not initialized");
  if (static_cast<Eigen::Index>(cs.pair_cost.size()) != e_count)
    throw StateError("lbp_sweep: pairwise costs not set");

  RMat total_in = RMat::Zero(n, k);
  for (Eigen::Index e = 0; e < e_count; ++e)
    total_in.row(cs.edges[static_cast<std::size_t>(e)].second) += cs.messages.row(e);

  if (record) {
    record->argmin.resize(e_count, k);
    record->norm_argmin.assign(static_cast<std::size_t>(e_count), 0);
    record->prev_messages = cs.messages;
  }

  const double t_soft = cfg.softmin_temperature;
  RMat next(e_count, k);
  Eigen::VectorXd base(k);
  for (Eigen::Index e = 0; e < e_count; ++e) {
    const auto [i, j] = cs.edges[static_cast<std::size_t>(e)];
    (void)j;
    const Eigen::Index rev = cs.reverse_edge[static_cast<std::size_t>(e)];
    base = cs.unary.row(i).transpose() + total_in.row(i).transpose() - cs.messages.row(rev).transpose();
    const RMat& pc = cs.pair_cost[static_cast<std::size_t>(e)];
    for (Eigen::Index q = 0; q < k; ++q) {
      if (t_soft > 0.0) {
        double lo = base[0] + cfg.alpha * pc(0, q);
        for (Eigen::Index p = 1; p < k; ++p) lo = std::min(lo, base[p] + cfg.alpha * pc(p, q));
        double acc = 0.0;
        for (Eigen::Index p = 0; p < k; ++p)
          acc += std::exp(-(base[p] + cfg.alpha * pc(p, q) - lo) / t_soft);
        next(e, q) = lo - t_soft * std::log(acc);
        if (record) record->argmin(e, q) = 0;
      } else {
        double best = base[0] + cfg.alpha * pc(0, q);
        Eigen::Index best_p = 0;
        for (Eigen::Index p = 1; p < k; ++p) {
          const double c = base[p] + cfg.alpha * pc(p, q);
          if (c < best) {
            best = c;
            best_p = p;
          }
        }
        next(e, q) = best;
        if (record) record->argmin(e, q) = static_cast<int>(best_p);
      }
    }
    if (normalize) {
      Eigen::Index q0;
      const double lo = next.row(e).minCoeff(&q0);
      next.row(e).array() -= lo;
      if (record) record->norm_argmin[static_cast<std::size_t>(e)] = static_cast<int>(q0);
    }
  }
  cs.messages = std::move(next);
}

RMat beliefs(const CandidateSet& cs) {
  const Eigen::Index n = cs.n(), k = cs.k();
  if (cs.unary.rows() != n || cs.unary.cols() != k) throw StateError("beliefs: unary costs not set");
  RMat b = cs.unary;
  for (Eigen::Index e = 0; e < cs.edge_count(); ++e)
    b.row(cs.edges[static_cast<std::size_t>(e)].second) += cs.messages.row(e);
  return b;
}

SolveResult solve_from(CandidateSet& cs, const FeatureField& fx, const FeatureField& fy,
                       const SolverConfig& cfg, SolveTrace* trace) {
  cfg.validate();
  cs.unary = unary_costs(fx, fy, cs);
  reset_messages(cs);
  if (trace) trace->sweeps.clear();
  for (int t = 0; t < cfg.lbp_iterations; ++t) {
    SweepRecord rec;
    lbp_sweep(cs, cfg, true, trace ? &rec : nullptr);
    if (trace) trace->sweeps.push_back(std::move(rec));
  }
  const RMat b = beliefs(cs);
  const RMat w = softmax_rows((-b / cfg.softmax_temperature).eval());

  const Eigen::Index n = cs.n(), k = cs.k();
  SolveResult result;
  result.weights = w;
  result.field.displacements.resize(n, 3);
  for (Eigen::Index i = 0; i < n; ++i)
    result.field.displacements.row(i) = w.row(i) * cs.disp.middleRows(i * k, k);
  if (trace) trace->weights = w;
  return result;
}

SolveResult solve(const PointCloud& source, const PointCloud& target, const FeatureField& fx,
                  const FeatureField& fy, const SolverConfig& cfg) {
  CandidateSet cs = build_candidates(source, target, cfg);
  return solve_from(cs, fx, fy, cfg);
}

void solve_bwd(const CandidateSet& cs, const SolverConfig& cfg, const SolveTrace& trace,
               const RMat& gfield, const FeatureField& fx, const FeatureField& fy, RMat& gfx,
               RMat& gfy) {
  const Eigen::Index n = cs.n(), k = cs.k(), e_count = cs.edge_count();
  if (gfield.rows() != n || gfield.cols() != 3) throw DimensionError("solve_bwd: bad field gradient shape");
  if (static_cast<int>(trace.sweeps.size()) != cfg.lbp_iterations)
    throw StateError("solve_bwd: trace does not match lbp_iterations");

  // field -> weights -> beliefs
  RMat gw(n, k);
  for (Eigen::Index i = 0; i < n; ++i)
    gw.row(i) = (cs.disp.middleRows(i * k, k) * gfield.row(i).transpose()).transpose();
  const RMat gb = softmax_rows_bwd(trace.weights, gw) * (-1.0 / cfg.softmax_temperature);

  RMat gunary = gb;
  RMat gm = RMat::Zero(e_count, k);
  for (Eigen::Index e = 0; e < e_count; ++e) gm.row(e) = gb.row(cs.edges[static_cast<std::size_t>(e)].second);

  Eigen::VectorXd graw(k), base(k);
  for (std::size_t t = trace.sweeps.size(); t-- > 0;) {
    const SweepRecord& rec = trace.sweeps[t];
    RMat gprev = RMat::Zero(e_count, k);
    for (Eigen::Index e = 0; e < e_count; ++e) {
      const auto [i, j] = cs.edges[static_cast<std::size_t>(e)];
      const int rev = cs.reverse_edge[static_cast<std::size_t>(e)];
      graw = gm.row(e).transpose();
      graw[rec.norm_argmin[static_cast<std::size_t>(e)]] -= gm.row(e).sum();

      if (cfg.softmin_temperature > 0.0) {
        base = cs.unary.row(i).transpose();
        for (const int f : cs.in_edges[static_cast<std::size_t>(i)])
          if (f != rev) base += rec.prev_messages.row(f).transpose();
        const RMat& pc = cs.pair_cost[static_cast<std::size_t>(e)];
        Eigen::VectorXd cost(k), wgt(k);
        for (Eigen::Index q = 0; q < k; ++q) {
          const double g = graw[q];
          if (g == 0.0) continue;
          cost = base + cfg.alpha * pc.col(q);
          const double lo = cost.minCoeff();
          wgt = (-(cost.array() - lo) / cfg.softmin_temperature).exp();
          wgt /= wgt.sum();
          for (Eigen::Index p = 0; p < k; ++p) {
            const double gp = g * wgt[p];
            if (gp == 0.0) continue;
            gunary(i, p) += gp;
            for (const int f : cs.in_edges[static_cast<std::size_t>(i)])
              if (f != rev) gprev(f, p) += gp;
          }
        }
      } else {
        for (Eigen::Index q = 0; q < k; ++q) {
          const double g = graw[q];
          if (g == 0.0) continue;
          const int p = rec.argmin(e, q);
          gunary(i, p) += g;
          for (const int f : cs.in_edges[static_cast<std::size_t>(i)])
            if (f != rev) gprev(f, p) += g;
        }
      }
    }
    gm = std::move(gprev);
  }

  // unary -> features
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index p = 0; p < k; ++p) {
      const double g = gunary(i, p);
      if (g == 0.0) continue;
      const int c = cs.candidates(i, p);
      const Eigen::RowVectorXd diff = fx.row(i) - fy.row(c);
      gfx.row(i) += 2.0 * g * diff;
      gfy.row(c) -= 2.0 * g * diff;
    }
  }
}

}  // namespace defreg
