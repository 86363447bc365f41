#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "defreg/common.hpp"

namespace defreg {

template <class Scalar>
using Points3 = Eigen::Matrix<Scalar, Eigen::Dynamic, 3>;

template <class Scalar>
using Vector3 = Eigen::Matrix<Scalar, 3, 1>;

// Ordered set of 3D points with optional named per-point scalar channels.
template <class Scalar>
struct PointCloudT {
  Points3<Scalar> points;
  std::map<std::string, Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> attributes;

  PointCloudT() = default;
  explicit PointCloudT(Points3<Scalar> pts) : points(std::move(pts)) {}

  Eigen::Index size() const { return points.rows(); }

  void validate() const {
    if (points.rows() < 1) throw DimensionError("point cloud must contain at least one point");
    if (!points.allFinite()) throw DimensionError("point cloud contains non-finite coordinates");
    for (const auto& [name, chan] : attributes) {
      if (chan.size() != points.rows())
        throw DimensionError("attribute '" + name + "' length does not match point count");
    }
  }
};

template <class Scalar>
struct RigidTransformT {
  Eigen::Matrix<Scalar, 3, 3> rotation = Eigen::Matrix<Scalar, 3, 3>::Identity();
  Vector3<Scalar> translation = Vector3<Scalar>::Zero();

  // Orthogonal with determinant +1, within tol.
  bool is_valid(double tol = 1e-6) const {
    Eigen::Matrix3d r = rotation.template cast<double>();
    double ortho = (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    return ortho <= tol && std::abs(r.determinant() - 1.0) <= tol;
  }
};

// Per-source-point displacement vectors; aligned index-for-index with the
// cloud it was built against.
template <class Scalar>
struct DeformationFieldT {
  Points3<Scalar> displacements;

  DeformationFieldT() = default;
  explicit DeformationFieldT(Points3<Scalar> d) : displacements(std::move(d)) {}

  Eigen::Index size() const { return displacements.rows(); }
};

struct CorrespondenceSet {
  // column 0: source index, column 1: target index
  Eigen::Matrix<int, Eigen::Dynamic, 2> pairs;

  Eigen::Index size() const { return pairs.rows(); }

  void validate(Eigen::Index n_source, Eigen::Index n_target) const {
    std::vector<bool> seen(static_cast<std::size_t>(n_source), false);
    for (Eigen::Index r = 0; r < pairs.rows(); ++r) {
      const int s = pairs(r, 0), t = pairs(r, 1);
      if (s < 0 || s >= n_source || t < 0 || t >= n_target)
        throw DimensionError("correspondence index out of range");
      if (seen[static_cast<std::size_t>(s)])
        throw DimensionError("duplicate source index in correspondence set");
      seen[static_cast<std::size_t>(s)] = true;
    }
  }
};

using PointCloud = PointCloudT<double>;
using RigidTransform = RigidTransformT<double>;
using DeformationField = DeformationFieldT<double>;

template <class Scalar>
PointCloudT<Scalar> apply_rigid(const PointCloudT<Scalar>& cloud, const RigidTransformT<Scalar>& xf) {
  if (!xf.is_valid())
    throw InvalidTransformError("rotation is not orthogonal with determinant +1");
  PointCloudT<Scalar> out = cloud;
  out.points = (cloud.points * xf.rotation.transpose()).rowwise() + xf.translation.transpose();
  return out;
}

template <class Scalar>
PointCloudT<Scalar> apply_deformation(const PointCloudT<Scalar>& cloud, const DeformationFieldT<Scalar>& field) {
  if (field.size() != cloud.size())
    throw DimensionError("deformation field length does not match cloud size");
  PointCloudT<Scalar> out = cloud;
  out.points = cloud.points + field.displacements;
  return out;
}

// Arithmetic mean of per-index Euclidean distances; correspondence is
// positional. Always evaluated in double.
template <class Scalar>
double mean_distance(const PointCloudT<Scalar>& a, const PointCloudT<Scalar>& b) {
  if (a.size() != b.size())
    throw DimensionError("mean_distance requires equal cardinality");
  if (a.size() == 0) throw DimensionError("mean_distance on empty clouds");
  const Eigen::MatrixX3d pa = a.points.template cast<double>();
  const Eigen::MatrixX3d pb = b.points.template cast<double>();
  return (pa - pb).rowwise().norm().mean();
}

// Two-sided mean of squared nearest-neighbor distances.
template <class Scalar>
double chamfer_distance(const PointCloudT<Scalar>& a, const PointCloudT<Scalar>& b) {
  if (a.size() == 0 || b.size() == 0)
    throw DimensionError("chamfer_distance on empty cloud");
  const Eigen::MatrixX3d pa = a.points.template cast<double>();
  const Eigen::MatrixX3d pb = b.points.template cast<double>();
  auto one_sided = [](const Eigen::MatrixX3d& from, const Eigen::MatrixX3d& to) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < from.rows(); ++i) {
      acc += (to.rowwise() - from.row(i)).rowwise().squaredNorm().minCoeff();
    }
    return acc / static_cast<double>(from.rows());
  };
  return one_sided(pa, pb) + one_sided(pb, pa);
}

// Row i lists the k reference indices nearest to query row i, ascending by
// squared Euclidean distance, ties broken by lower reference index.
// Exhaustive scan; this is the reference implementation and any accelerated
// variant must reproduce its indices exactly.
template <class DerivedQ, class DerivedR>
Eigen::MatrixXi knn_indices(const Eigen::MatrixBase<DerivedQ>& query,
                            const Eigen::MatrixBase<DerivedR>& reference, int k) {
  const Eigen::Index nq = query.rows();
  const Eigen::Index nr = reference.rows();
  if (k < 1 || k > nr) throw ConfigError("knn_indices: k must satisfy 1 <= k <= |reference|");
  if (query.cols() != reference.cols())
    throw DimensionError("knn_indices: query/reference width mismatch");

  using RowMajorMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const RowMajorMat q = query.template cast<double>();
  const RowMajorMat r = reference.template cast<double>();

  Eigen::MatrixXi out(nq, k);
  std::vector<std::pair<double, int>> cand(static_cast<std::size_t>(nr));
  for (Eigen::Index i = 0; i < nq; ++i) {
    for (Eigen::Index j = 0; j < nr; ++j) {
      cand[static_cast<std::size_t>(j)] = {(r.row(j) - q.row(i)).squaredNorm(), static_cast<int>(j)};
    }
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    for (int c = 0; c < k; ++c) out(i, c) = cand[static_cast<std::size_t>(c)].second;
  }
  return out;
}

template <class Scalar>
Eigen::MatrixXi knn_indices(const PointCloudT<Scalar>& query, const PointCloudT<Scalar>& reference, int k) {
  return knn_indices(query.points, reference.points, k);
}

// k nearest neighbors of each row among the other rows of the same matrix.
// With exact duplicate rows the duplicate (not the row itself) may be kept;
// either way each row ends up with k neighbors other than its own index.
template <class Derived>
Eigen::MatrixXi knn_indices_self_excluded(const Eigen::MatrixBase<Derived>& pts, int k) {
  const Eigen::Index n = pts.rows();
  if (k < 1 || k >= n) throw ConfigError("knn_indices_self_excluded: need 1 <= k < n");
  const Eigen::MatrixXi with_self = knn_indices(pts, pts, k + 1);
  Eigen::MatrixXi out(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    int w = 0;
    bool skipped = false;
    for (int c = 0; c <= k; ++c) {
      const int j = with_self(i, c);
      if (!skipped && j == static_cast<int>(i)) {
        skipped = true;
        continue;
      }
      if (w == k) break;
      out(i, w++) = j;
    }
  }
  return out;
}

inline Eigen::Matrix3d rotation_about_z(double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  Eigen::Matrix3d r;
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return r;
}

}  // namespace defreg
