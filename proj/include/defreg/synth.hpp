#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "defreg/geometry.hpp"

namespace defreg {

struct ChallengeSpec {
  double deformation_level = 0.0;
  double noise_sigma = 0.0;
  double outlier_fraction = 0.0;
  double overlap_ratio = 1.0;
  double rotation_max = 0.0;  // radians, about z
  std::uint64_t seed = 0;

  void validate() const;
};

struct StageSeeds {
  std::uint64_t deform = 0;
  std::uint64_t rotate = 0;
  std::uint64_t crop = 0;
  std::uint64_t noise = 0;
  std::uint64_t outliers = 0;
};

// field_gt rows align with correspondence rows (row r belongs to source point
// correspondences.pairs(r,0)), not with source rows; solver output fields are
// source-aligned instead.
struct RegistrationPair {
  PointCloud source;
  PointCloud target;
  CorrespondenceSet correspondences;
  DeformationField field_gt;
  RigidTransform rigid;
  ChallengeSpec spec;
  StageSeeds stage_seeds;
  std::vector<int> outlier_indices;  // target rows injected by add_outliers
};

// box | sphere | cylinder | cone | torus, surface-sampled, centered, unit
// bounding-box diagonal.
PointCloud sample_primitive(const std::string& name, int n, std::uint64_t seed);
std::vector<std::string> primitive_names();

PointCloud normalize_unit_diagonal(const PointCloud& cloud);
double bbox_diagonal(const PointCloud& cloud);

// Smooth random warp: 8 Gaussian radial kernels, bandwidth 0.3 x diagonal,
// rescaled so the 95th-percentile displacement magnitude (nearest-rank) equals
// level * 0.5 * diagonal.
std::pair<PointCloud, DeformationField> deform(const PointCloud& source, double level, std::uint64_t seed);

PointCloud add_noise(const PointCloud& cloud, double sigma, std::uint64_t seed);

std::pair<PointCloud, std::vector<int>> add_outliers(const PointCloud& cloud, double fraction,
                                                     std::uint64_t seed);

RegistrationPair crop_to_overlap(const RegistrationPair& pair, double ratio, std::uint64_t seed);

// deform -> rotate target -> crop_to_overlap -> add_noise -> add_outliers
RegistrationPair make_pair(const PointCloud& source, const ChallengeSpec& spec);

// Mean Euclidean distance over ground-truth correspondences, before and after
// applying a source-aligned displacement field.
double corr_mean_distance(const RegistrationPair& pair);
double corr_mean_distance(const RegistrationPair& pair, const DeformationField& field);

}  // namespace defreg
