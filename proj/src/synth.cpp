#include "defreg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "defreg/common.hpp"
#include "defreg/rng.hpp"

namespace defreg {

namespace {

constexpr std::uint64_t kSaltDeform = 1;
constexpr std::uint64_t kSaltRotate = 2;
constexpr std::uint64_t kSaltCrop = 3;
constexpr std::uint64_t kSaltNoise = 4;
constexpr std::uint64_t kSaltOutliers = 5;

using std::numbers::pi;

PointCloud sample_box(int n, std::mt19937_64& rng) {
  // unit cube surface, faces picked uniformly (equal areas)
  std::uniform_int_distribution<int> face(0, 5);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Points3<double> pts(n, 3);
  for (int i = 0; i < n; ++i) {
    const int f = face(rng);
    const double a = u01(rng), b = u01(rng);
    const int axis = f / 2;
    const double fixed = (f % 2 == 0) ? 0.0 : 1.0;
    Eigen::Vector3d p;
    p[axis] = fixed;
    p[(axis + 1) % 3] = a;
    p[(axis + 2) % 3] = b;
    pts.row(i) = p.transpose();
  }
  return PointCloud(std::move(pts));
}

PointCloud sample_sphere(int n, std::mt19937_64& rng) {
  Points3<double> pts(n, 3);
  for (int i = 0; i < n; ++i) pts.row(i) = (0.5 * random_unit_vector(rng)).transpose();
  return PointCloud(std::move(pts));
}

PointCloud sample_cylinder(int n, std::mt19937_64& rng) {
  const double r = 0.3, h = 1.0;
  const double side_area = 2.0 * pi * r * h;
  const double cap_area = pi * r * r;
  const double total = side_area + 2.0 * cap_area;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Points3<double> pts(n, 3);
  for (int i = 0; i < n; ++i) {
    const double pick = u01(rng) * total;
    const double ang = u01(rng) * 2.0 * pi;
    if (pick < side_area) {
      const double z = u01(rng) * h - h / 2.0;
      pts.row(i) << r * std::cos(ang), r * std::sin(ang), z;
    } else {
      const double rr = r * std::sqrt(u01(rng));
      const double z = (pick < side_area + cap_area) ? -h / 2.0 : h / 2.0;
      pts.row(i) << rr * std::cos(ang), rr * std::sin(ang), z;
    }
  }
  return PointCloud(std::move(pts));
}

PointCloud sample_cone(int n, std::mt19937_64& rng) {
  const double r = 0.4, h = 1.0;
  const double slant = std::sqrt(r * r + h * h);
  const double side_area = pi * r * slant;
  const double base_area = pi * r * r;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Points3<double> pts(n, 3);
  for (int i = 0; i < n; ++i) {
    const double pick = u01(rng) * (side_area + base_area);
    const double ang = u01(rng) * 2.0 * pi;
    if (pick < side_area) {
      // lateral surface: radius density grows linearly toward the base
      const double t = std::sqrt(u01(rng));  // 0 apex .. 1 base
      const double rr = r * t;
      pts.row(i) << rr * std::cos(ang), rr * std::sin(ang), h * (1.0 - t) - h / 2.0;
    } else {
      const double rr = r * std::sqrt(u01(rng));
      pts.row(i) << rr * std::cos(ang), rr * std::sin(ang), -h / 2.0;
    }
  }
  return PointCloud(std::move(pts));
}

PointCloud sample_torus(int n, std::mt19937_64& rng) {
  const double R = 0.35, r = 0.15;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Points3<double> pts(n, 3);
  for (int i = 0; i < n; ++i) {
    const double u = u01(rng) * 2.0 * pi;
    // rejection sampling for the tube angle: area element scales with R + r cos v
    double v;
    for (;;) {
      v = u01(rng) * 2.0 * pi;
      if (u01(rng) * (R + r) <= R + r * std::cos(v)) break;
    }
    const double w = R + r * std::cos(v);
    pts.row(i) << w * std::cos(u), w * std::sin(u), r * std::sin(v);
  }
  return PointCloud(std::move(pts));
}

}  // namespace

void ChallengeSpec::validate() const {
  if (!(deformation_level >= 0.0 && deformation_level <= 1.0))
    throw ConfigError("deformation_level must be in [0,1]");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be nonnegative");
  if (!(outlier_fraction >= 0.0 && outlier_fraction < 1.0))
    throw ConfigError("outlier_fraction must be in [0,1)");
  if (!(overlap_ratio > 0.0 && overlap_ratio <= 1.0))
    throw ConfigError("overlap_ratio must be in (0,1]");
  if (!(rotation_max >= 0.0)) throw ConfigError("rotation_max must be nonnegative");
}

std::vector<std::string> primitive_names() { return {"box", "sphere", "cylinder", "cone", "torus"}; }

PointCloud sample_primitive(const std::string& name, int n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("sample_primitive: n must be positive");
  auto rng = make_rng(seed);
  PointCloud cloud;
  if (name == "box")
    cloud = sample_box(n, rng);
  else if (name == "sphere")
    cloud = sample_sphere(n, rng);
  else if (name == "cylinder")
    cloud = sample_cylinder(n, rng);
  else if (name == "cone")
    cloud = sample_cone(n, rng);
  else if (name == "torus")
    cloud = sample_torus(n, rng);
  else
    throw ConfigError("unknown primitive '" + name + "'");
  return normalize_unit_diagonal(cloud);
}

double bbox_diagonal(const PointCloud& cloud) {
  if (cloud.size() == 0) throw DimensionError("bbox_diagonal on empty cloud");
  const Eigen::RowVector3d lo = cloud.points.colwise().minCoeff();
  const Eigen::RowVector3d hi = cloud.points.colwise().maxCoeff();
  return (hi - lo).norm();
}

PointCloud normalize_unit_diagonal(const PointCloud& cloud) {
  cloud.validate();
  const double diag = bbox_diagonal(cloud);
  if (diag <= 0.0) throw GenerationError("degenerate cloud: zero bounding-box diagonal");
  PointCloud out = cloud;
  const Eigen::RowVector3d centroid = cloud.points.colwise().mean();
  out.points = (cloud.points.rowwise() - centroid) / diag;
  return out;
}

std::pair<PointCloud, DeformationField> deform(const PointCloud& source, double level,
                                               std::uint64_t seed) {
  if (!(level >= 0.0 && level <= 1.0)) throw ConfigError("deform: level must be in [0,1]");
  source.validate();
  const Eigen::Index n = source.size();
  DeformationField field(Points3<double>::Zero(n, 3));
  if (level == 0.0) return {source, field};

  const double diag = bbox_diagonal(source);
  if (diag <= 0.0) throw GenerationError("deform: degenerate cloud");
  auto rng = make_rng(seed);

  constexpr int kKernels = 8;
  const double bandwidth = 0.3 * diag;
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  Points3<double> centers(kKernels, 3), dirs(kKernels, 3);
  for (int k = 0; k < kKernels; ++k) centers.row(k) = source.points.row(pick(rng));
  for (int k = 0; k < kKernels; ++k) dirs.row(k) = random_unit_vector(rng).transpose();

  const double inv2s2 = 1.0 / (2.0 * bandwidth * bandwidth);
  for (int k = 0; k < kKernels; ++k) {
    const Eigen::VectorXd w =
        (-(source.points.rowwise() - centers.row(k)).rowwise().squaredNorm() * inv2s2).array().exp();
    field.displacements.noalias() += w * dirs.row(k);
  }

  // nearest-rank 95th percentile of displacement magnitudes
  Eigen::VectorXd mags = field.displacements.rowwise().norm();
  std::vector<double> sorted(mags.data(), mags.data() + n);
  std::sort(sorted.begin(), sorted.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n))) - 1;
  const double p95 = sorted[rank];
  if (p95 <= 1e-12) throw GenerationError("deform: degenerate displacement field");
  field.displacements *= level * 0.5 * diag / p95;

  PointCloud out = source;
  out.points += field.displacements;
  return {std::move(out), std::move(field)};
}

PointCloud add_noise(const PointCloud& cloud, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw ConfigError("add_noise: sigma must be nonnegative");
  if (sigma == 0.0) return cloud;
  auto rng = make_rng(seed);
  std::normal_distribution<double> gauss(0.0, sigma);
  PointCloud out = cloud;
  for (Eigen::Index i = 0; i < out.size(); ++i)
    for (int c = 0; c < 3; ++c) out.points(i, c) += gauss(rng);
  return out;
}

std::pair<PointCloud, std::vector<int>> add_outliers(const PointCloud& cloud, double fraction,
                                                     std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ConfigError("add_outliers: fraction must be in [0,1)");
  const Eigen::Index n = cloud.size();
  const auto m = static_cast<Eigen::Index>(std::llround(fraction * static_cast<double>(n)));
  if (m == 0) return {cloud, {}};

  const Eigen::RowVector3d lo = cloud.points.colwise().minCoeff();
  const Eigen::RowVector3d hi = cloud.points.colwise().maxCoeff();
  const Eigen::RowVector3d center = 0.5 * (lo + hi);
  const Eigen::RowVector3d half = 0.55 * (hi - lo);  // box inflated by 10%

  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  PointCloud out = cloud;
  out.points.conservativeResize(n + m, 3);
  std::vector<int> injected;
  injected.reserve(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) {
    for (int c = 0; c < 3; ++c) out.points(n + i, c) = center[c] + u(rng) * half[c];
    injected.push_back(static_cast<int>(n + i));
  }
  for (auto& [name, chan] : out.attributes) {
    chan.conservativeResize(n + m);
    chan.tail(m).setZero();
  }
  return {std::move(out), std::move(injected)};
}

RegistrationPair crop_to_overlap(const RegistrationPair& pair, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("crop_to_overlap: ratio must be in (0,1]");
  if (ratio == 1.0) return pair;
  const Eigen::Index n_corr = pair.correspondences.size();
  const Eigen::Index n_tgt = pair.target.size();
  if (n_corr == 0) throw GenerationError("crop_to_overlap: pair has no correspondences");

  auto keep_count = static_cast<Eigen::Index>(std::llround(ratio * static_cast<double>(n_corr)));
  if (keep_count < 1) throw GenerationError("crop_to_overlap: requested ratio keeps no correspondences");
  const double achieved = static_cast<double>(keep_count) / static_cast<double>(n_corr);
  if (std::abs(achieved - ratio) > 0.02)
    throw GenerationError("crop_to_overlap: ratio unreachable within 0.02 at this point count");

  auto rng = make_rng(seed);
  const Eigen::Vector3d dir = random_unit_vector(rng);
  const Eigen::VectorXd proj = pair.target.points * dir;

  // keep the half-space containing the keep_count correspondent targets with
  // the smallest sweep projection
  std::vector<std::pair<double, int>> corr_proj(static_cast<std::size_t>(n_corr));
  for (Eigen::Index r = 0; r < n_corr; ++r) {
    const int t = pair.correspondences.pairs(r, 1);
    corr_proj[static_cast<std::size_t>(r)] = {proj[t], t};
  }
  std::sort(corr_proj.begin(), corr_proj.end());
  const double cutoff = corr_proj[static_cast<std::size_t>(keep_count - 1)].first;

  std::vector<bool> keep(static_cast<std::size_t>(n_tgt), false);
  for (Eigen::Index r = 0; r < keep_count; ++r)
    keep[static_cast<std::size_t>(corr_proj[static_cast<std::size_t>(r)].second)] = true;
  for (Eigen::Index t = 0; t < n_tgt; ++t)
    if (proj[t] < cutoff) keep[static_cast<std::size_t>(t)] = true;

  std::vector<int> remap(static_cast<std::size_t>(n_tgt), -1);
  Eigen::Index kept = 0;
  for (Eigen::Index t = 0; t < n_tgt; ++t)
    if (keep[static_cast<std::size_t>(t)]) remap[static_cast<std::size_t>(t)] = static_cast<int>(kept++);

  RegistrationPair out = pair;
  out.target.points.resize(kept, 3);
  for (Eigen::Index t = 0; t < n_tgt; ++t)
    if (remap[static_cast<std::size_t>(t)] >= 0)
      out.target.points.row(remap[static_cast<std::size_t>(t)]) = pair.target.points.row(t);
  for (auto& [name, chan] : out.target.attributes) {
    Eigen::VectorXd next(kept);
    for (Eigen::Index t = 0; t < n_tgt; ++t)
      if (remap[static_cast<std::size_t>(t)] >= 0) next[remap[static_cast<std::size_t>(t)]] = chan[t];
    chan = std::move(next);
  }

  std::vector<Eigen::Index> surviving;
  for (Eigen::Index r = 0; r < n_corr; ++r)
    if (remap[static_cast<std::size_t>(pair.correspondences.pairs(r, 1))] >= 0) surviving.push_back(r);
  out.correspondences.pairs.resize(static_cast<Eigen::Index>(surviving.size()), 2);
  out.field_gt.displacements.resize(static_cast<Eigen::Index>(surviving.size()), 3);
  for (Eigen::Index s = 0; s < static_cast<Eigen::Index>(surviving.size()); ++s) {
    const Eigen::Index r = surviving[static_cast<std::size_t>(s)];
    out.correspondences.pairs(s, 0) = pair.correspondences.pairs(r, 0);
    out.correspondences.pairs(s, 1) = remap[static_cast<std::size_t>(pair.correspondences.pairs(r, 1))];
    out.field_gt.displacements.row(s) = pair.field_gt.displacements.row(r);
  }
  return out;
}

RegistrationPair make_pair(const PointCloud& source, const ChallengeSpec& spec) {
  spec.validate();
  source.validate();
  const Eigen::Index n = source.size();

  RegistrationPair pair;
  pair.spec = spec;
  pair.source = source;
  pair.stage_seeds = {mix_seed(spec.seed, kSaltDeform), mix_seed(spec.seed, kSaltRotate),
                      mix_seed(spec.seed, kSaltCrop), mix_seed(spec.seed, kSaltNoise),
                      mix_seed(spec.seed, kSaltOutliers)};

  auto [deformed, field] = deform(source, spec.deformation_level, pair.stage_seeds.deform);

  auto rot_rng = make_rng(pair.stage_seeds.rotate);
  std::uniform_real_distribution<double> angle_dist(0.0, spec.rotation_max);
  const double angle = spec.rotation_max > 0.0 ? angle_dist(rot_rng) : 0.0;
  pair.rigid.rotation = rotation_about_z(angle);
  pair.rigid.translation.setZero();
  pair.target = apply_rigid(deformed, pair.rigid);

  pair.correspondences.pairs.resize(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    pair.correspondences.pairs(i, 0) = static_cast<int>(i);
    pair.correspondences.pairs(i, 1) = static_cast<int>(i);
  }
  pair.field_gt = std::move(field);

  pair = crop_to_overlap(pair, spec.overlap_ratio, pair.stage_seeds.crop);
  pair.target = add_noise(pair.target, spec.noise_sigma, pair.stage_seeds.noise);
  auto [with_outliers, injected] = add_outliers(pair.target, spec.outlier_fraction, pair.stage_seeds.outliers);
  pair.target = std::move(with_outliers);
  pair.outlier_indices = std::move(injected);
  return pair;
}

double corr_mean_distance(const RegistrationPair& pair) {
  const Eigen::Index m = pair.correspondences.size();
  if (m == 0) throw DimensionError("corr_mean_distance: pair has no correspondences");
  double acc = 0.0;
  for (Eigen::Index r = 0; r < m; ++r) {
    const int s = pair.correspondences.pairs(r, 0);
    const int t = pair.correspondences.pairs(r, 1);
    acc += (pair.source.points.row(s) - pair.target.points.row(t)).norm();
  }
  return acc / static_cast<double>(m);
}

double corr_mean_distance(const RegistrationPair& pair, const DeformationField& field) {
  if (field.size() != pair.source.size())
    throw DimensionError("corr_mean_distance: field must be source-aligned");
  const Eigen::Index m = pair.correspondences.size();
  if (m == 0) throw DimensionError("corr_mean_distance: pair has no correspondences");
  double acc = 0.0;
  for (Eigen::Index r = 0; r < m; ++r) {
    const int s = pair.correspondences.pairs(r, 0);
    const int t = pair.correspondences.pairs(r, 1);
    acc += (pair.source.points.row(s) + field.displacements.row(s) - pair.target.points.row(t)).norm();
  }
  return acc / static_cast<double>(m);
}

}  // namespace defreg
