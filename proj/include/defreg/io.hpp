#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "defreg/synth.hpp"

namespace defreg {

struct BundleMeta {
  std::string provenance = "defreg-gen";
  std::optional<double> overlap;
  std::optional<std::string> label;
};

// ASCII XYZ, one point per line, 17 significant digits (doubles round-trip).
void write_xyz(const Points3<double>& pts, const std::filesystem::path& path);
Points3<double> read_xyz(const std::filesystem::path& path);

// Bundle directory layout: source.xyz, target.xyz, corr.csv, meta.json.
// Point files are ASCII XYZ at 17 significant digits (lossless for double).
void write_bundle(const RegistrationPair& pair, const std::filesystem::path& dir,
                  const BundleMeta& meta = {});
RegistrationPair read_bundle(const std::filesystem::path& dir, BundleMeta* meta_out = nullptr);

struct FourDMatchRecord {
  Points3<double> X;  // source points
  Points3<double> D;  // per-source-point deformation
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();
  double overlap = 1.0;
  Eigen::Matrix<int, Eigen::Dynamic, 2> corr;

  void validate() const;
};

// Archive: one JSON document {"format_version":1,"records":[...]} with
// per-record fields named exactly X, D, R, t, overlap, corr.
std::vector<FourDMatchRecord> read_4dmatch_archive(const std::filesystem::path& path);
void write_4dmatch_archive(const std::vector<FourDMatchRecord>& records,
                           const std::filesystem::path& path);

// y_r = t + R(x_i + d_i) for each correspondence row r with source index i;
// output cardinality equals the correspondence count.
PointCloud reconstruct_4dmatch_target(const FourDMatchRecord& rec);

// overlap > 0.45 -> "4DMatch", else "4DLoMatch"
std::string overlap_label(double overlap);

// Source restricted to corresponding points, target reconstructed, identity
// correspondences over the restriction.
RegistrationPair pair_from_4dmatch(const FourDMatchRecord& rec);

// ASCII PLY with per-vertex color mapped linearly from the named channel:
// min -> red (255,0,0), max -> blue (0,0,255); constant channel -> all red.
void export_colorized(const PointCloud& cloud, const std::string& channel,
                      const std::filesystem::path& path);

// Generic named-array container (checkpoints, optimizer state). JSON document
// with a format-version field and a per-array shape manifest; doubles
// round-trip bit-exactly.
struct ArrayStore {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Eigen::MatrixXd>> arrays;

  const Eigen::MatrixXd* find(const std::string& name) const;
};

void write_arrays(const ArrayStore& store, const std::filesystem::path& path);
ArrayStore read_arrays(const std::filesystem::path& path);

}  // namespace defreg
