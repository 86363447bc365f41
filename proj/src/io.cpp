#include "defreg/io.hpp"

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "defreg/common.hpp"

namespace defreg {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << text;
  if (!out.good()) throw IoError("write failed: " + path.string());
}

std::string read_text(const fs::path& path, const char* part) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(std::string("bundle missing ") + part + ": " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string format_xyz(const Points3<double>& pts) {
  std::string out;
  out.reserve(static_cast<std::size_t>(pts.rows()) * 72);
  char buf[96];
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n", pts(i, 0), pts(i, 1), pts(i, 2));
    out += buf;
  }
  return out;
}

Points3<double> parse_xyz(const std::string& text, const fs::path& path) {
  std::vector<Eigen::Vector3d> rows;
  std::istringstream in(text);
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    const char* s = line.c_str();
    char* end = nullptr;
    Eigen::Vector3d p;
    for (int c = 0; c < 3; ++c) {
      errno = 0;
      p[c] = std::strtod(s, &end);
      if (end == s)
        throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected 3 coordinates");
      if (!std::isfinite(p[c]))
        throw ParseError(path.string() + ":" + std::to_string(lineno) + ": non-finite coordinate");
      s = end;
    }
    while (*s == ' ' || *s == '\t' || *s == '\r') ++s;
    if (*s != '\0')
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": trailing garbage");
    rows.push_back(p);
  }
  if (rows.empty()) throw ParseError(path.string() + ":1: no points");
  Points3<double> pts(static_cast<Eigen::Index>(rows.size()), 3);
  for (Eigen::Index i = 0; i < pts.rows(); ++i) pts.row(i) = rows[static_cast<std::size_t>(i)].transpose();
  return pts;
}

json points_to_json(const Points3<double>& pts) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < pts.rows(); ++i)
    rows.push_back(json::array({pts(i, 0), pts(i, 1), pts(i, 2)}));
  return rows;
}

Points3<double> points_from_json(const json& rows, const char* what) {
  if (!rows.is_array() || rows.empty()) throw FormatError(std::string(what) + ": expected non-empty array");
  Points3<double> pts(static_cast<Eigen::Index>(rows.size()), 3);
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    const auto& row = rows[static_cast<std::size_t>(i)];
    if (!row.is_array() || row.size() != 3)
      throw FormatError(std::string(what) + ": row " + std::to_string(i) + " is not a 3-vector");
    for (int c = 0; c < 3; ++c) pts(i, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return pts;
}

}  // namespace

void write_xyz(const Points3<double>& pts, const fs::path& path) {
  write_text(path, format_xyz(pts));
}

Points3<double> read_xyz(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_xyz(ss.str(), path);
}

void write_bundle(const RegistrationPair& pair, const fs::path& dir, const BundleMeta& meta) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create bundle directory " + dir.string() + ": " + ec.message());

  write_text(dir / "source.xyz", format_xyz(pair.source.points));
  write_text(dir / "target.xyz", format_xyz(pair.target.points));

  std::string corr = "source,target\n";
  char buf[48];
  for (Eigen::Index r = 0; r < pair.correspondences.size(); ++r) {
    std::snprintf(buf, sizeof buf, "%d,%d\n", pair.correspondences.pairs(r, 0),
                  pair.correspondences.pairs(r, 1));
    corr += buf;
  }
  write_text(dir / "corr.csv", corr);

  json m;
  m["schema_version"] = kSchemaVersion;
  m["provenance"] = meta.provenance;
  m["challenge"] = {{"deformation_level", pair.spec.deformation_level},
                    {"noise_sigma", pair.spec.noise_sigma},
                    {"outlier_fraction", pair.spec.outlier_fraction},
                    {"overlap_ratio", pair.spec.overlap_ratio},
                    {"rotation_max", pair.spec.rotation_max},
                    {"seed", pair.spec.seed}};
  m["stage_seeds"] = {{"deform", pair.stage_seeds.deform},
                      {"rotate", pair.stage_seeds.rotate},
                      {"crop", pair.stage_seeds.crop},
                      {"noise", pair.stage_seeds.noise},
                      {"outliers", pair.stage_seeds.outliers}};
  json rot = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) rot.push_back(pair.rigid.rotation(r, c));
  m["rigid"] = {{"rotation", rot},
                {"translation", json::array({pair.rigid.translation[0], pair.rigid.translation[1],
                                             pair.rigid.translation[2]})}};
  m["field_gt"] = points_to_json(pair.field_gt.displacements);
  m["outlier_indices"] = pair.outlier_indices;
  if (meta.overlap) m["overlap"] = *meta.overlap;
  if (meta.label) m["label"] = *meta.label;
  write_text(dir / "meta.json", m.dump(2) + "\n");
}

RegistrationPair read_bundle(const fs::path& dir, BundleMeta* meta_out) {
  RegistrationPair pair;
  pair.source.points = parse_xyz(read_text(dir / "source.xyz", "source.xyz"), dir / "source.xyz");
  pair.target.points = parse_xyz(read_text(dir / "target.xyz", "target.xyz"), dir / "target.xyz");

  {
    const fs::path cpath = dir / "corr.csv";
    const std::string text = read_text(cpath, "corr.csv");
    std::istringstream in(text);
    std::string line;
    std::vector<std::pair<int, int>> rows;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (lineno == 1) {
        if (line != "source,target")
          throw ParseError(cpath.string() + ":1: expected header 'source,target'");
        continue;
      }
      if (line.empty()) continue;
      int s = 0, t = 0;
      if (std::sscanf(line.c_str(), "%d,%d", &s, &t) != 2)
        throw ParseError(cpath.string() + ":" + std::to_string(lineno) + ": expected 'int,int'");
      rows.emplace_back(s, t);
    }
    pair.correspondences.pairs.resize(static_cast<Eigen::Index>(rows.size()), 2);
    for (Eigen::Index r = 0; r < pair.correspondences.size(); ++r) {
      pair.correspondences.pairs(r, 0) = rows[static_cast<std::size_t>(r)].first;
      pair.correspondences.pairs(r, 1) = rows[static_cast<std::size_t>(r)].second;
    }
  }

  const fs::path mpath = dir / "meta.json";
  json m;
  try {
    m = json::parse(read_text(mpath, "meta.json"));
  } catch (const json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
  try {
    if (m.at("schema_version").get<int>() != kSchemaVersion)
      throw FormatError(mpath.string() + ": unsupported schema_version");
    const auto& ch = m.at("challenge");
    pair.spec.deformation_level = ch.at("deformation_level").get<double>();
    pair.spec.noise_sigma = ch.at("noise_sigma").get<double>();
    pair.spec.outlier_fraction = ch.at("outlier_fraction").get<double>();
    pair.spec.overlap_ratio = ch.at("overlap_ratio").get<double>();
    pair.spec.rotation_max = ch.at("rotation_max").get<double>();
    pair.spec.seed = ch.at("seed").get<std::uint64_t>();
    const auto& ss = m.at("stage_seeds");
    pair.stage_seeds.deform = ss.at("deform").get<std::uint64_t>();
    pair.stage_seeds.rotate = ss.at("rotate").get<std::uint64_t>();
    pair.stage_seeds.crop = ss.at("crop").get<std::uint64_t>();
    pair.stage_seeds.noise = ss.at("noise").get<std::uint64_t>();
    pair.stage_seeds.outliers = ss.at("outliers").get<std::uint64_t>();
    const auto& rigid = m.at("rigid");
    const auto& rot = rigid.at("rotation");
    if (!rot.is_array() || rot.size() != 9) throw FormatError(mpath.string() + ": rigid.rotation must have 9 entries");
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        pair.rigid.rotation(r, c) = rot[static_cast<std::size_t>(r * 3 + c)].get<double>();
    const auto& tr = rigid.at("translation");
    if (!tr.is_array() || tr.size() != 3) throw FormatError(mpath.string() + ": rigid.translation must have 3 entries");
    for (int c = 0; c < 3; ++c) pair.rigid.translation[c] = tr[static_cast<std::size_t>(c)].get<double>();
    pair.field_gt.displacements = points_from_json(m.at("field_gt"), "field_gt");
    pair.outlier_indices = m.at("outlier_indices").get<std::vector<int>>();
    if (meta_out) {
      meta_out->provenance = m.at("provenance").get<std::string>();
      meta_out->overlap.reset();
      meta_out->label.reset();
      if (m.contains("overlap")) meta_out->overlap = m.at("overlap").get<double>();
      if (m.contains("label")) meta_out->label = m.at("label").get<std::string>();
    }
  } catch (const json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }

  pair.source.validate();
  pair.target.validate();
  pair.correspondences.validate(pair.source.size(), pair.target.size());
  if (pair.field_gt.size() != pair.correspondences.size())
    throw FormatError(mpath.string() + ": field_gt row count does not match correspondence count");
  if (!pair.rigid.is_valid())
    throw FormatError(mpath.string() + ": rigid.rotation is not a rotation matrix");
  return pair;
}

void FourDMatchRecord::validate() const {
  if (X.rows() < 1) throw DimensionError("4dmatch record: empty X");
  if (D.rows() != X.rows()) throw DimensionError("4dmatch record: D shape does not match X");
  RigidTransform xf{R, t};
  if (!xf.is_valid(1e-5)) throw InvalidTransformError("4dmatch record: R is not a rotation matrix");
  if (!(overlap >= 0.0 && overlap <= 1.0)) throw FormatError("4dmatch record: overlap out of [0,1]");
  if (corr.rows() < 1) throw DimensionError("4dmatch record: empty correspondence set");
  for (Eigen::Index r = 0; r < corr.rows(); ++r)
    if (corr(r, 0) < 0 || corr(r, 0) >= X.rows())
      throw DimensionError("4dmatch record: correspondence source index out of range");
}

std::vector<FourDMatchRecord> read_4dmatch_archive(const fs::path& path) {
  json doc;
  try {
    doc = json::parse(read_text(path, "archive"));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (!doc.is_object() || doc.value("format_version", 0) != 1)
    throw FormatError(path.string() + ": expected object with format_version 1");
  if (!doc.contains("records") || !doc["records"].is_array())
    throw FormatError(path.string() + ": missing records array");

  std::vector<FourDMatchRecord> records;
  for (std::size_t k = 0; k < doc["records"].size(); ++k) {
    try {
      const auto& j = doc["records"][k];
      FourDMatchRecord rec;
      rec.X = points_from_json(j.at("X"), "X");
      rec.D = points_from_json(j.at("D"), "D");
      const auto& rr = j.at("R");
      if (!rr.is_array() || rr.size() != 3) throw FormatError("R must be a 3x3 nested array");
      for (int r = 0; r < 3; ++r) {
        if (!rr[static_cast<std::size_t>(r)].is_array() || rr[static_cast<std::size_t>(r)].size() != 3)
          throw FormatError("R must be a 3x3 nested array");
        for (int c = 0; c < 3; ++c)
          rec.R(r, c) = rr[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
      }
      const auto& tt = j.at("t");
      if (!tt.is_array() || tt.size() != 3) throw FormatError("t must have 3 entries");
      for (int c = 0; c < 3; ++c) rec.t[c] = tt[static_cast<std::size_t>(c)].get<double>();
      rec.overlap = j.at("overlap").get<double>();
      const auto& cc = j.at("corr");
      if (!cc.is_array() || cc.empty()) throw FormatError("corr must be a non-empty array");
      rec.corr.resize(static_cast<Eigen::Index>(cc.size()), 2);
      for (Eigen::Index r = 0; r < rec.corr.rows(); ++r) {
        const auto& row = cc[static_cast<std::size_t>(r)];
        if (!row.is_array() || row.size() != 2) throw FormatError("corr rows must be index pairs");
        rec.corr(r, 0) = row[0].get<int>();
        rec.corr(r, 1) = row[1].get<int>();
      }
      rec.validate();
      records.push_back(std::move(rec));
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ": record " + std::to_string(k) + ": " + e.what());
    } catch (const Error& e) {
      throw FormatError(path.string() + ": record " + std::to_string(k) + ": " + e.what());
    }
  }
  return records;
}

void write_4dmatch_archive(const std::vector<FourDMatchRecord>& records, const fs::path& path) {
  json doc;
  doc["format_version"] = 1;
  doc["records"] = json::array();
  for (const auto& rec : records) {
    json j;
    j["X"] = points_to_json(rec.X);
    j["D"] = points_to_json(rec.D);
    json rr = json::array();
    for (int r = 0; r < 3; ++r)
      rr.push_back(json::array({rec.R(r, 0), rec.R(r, 1), rec.R(r, 2)}));
    j["R"] = rr;
    j["t"] = json::array({rec.t[0], rec.t[1], rec.t[2]});
    j["overlap"] = rec.overlap;
    json cc = json::array();
    for (Eigen::Index r = 0; r < rec.corr.rows(); ++r)
      cc.push_back(json::array({rec.corr(r, 0), rec.corr(r, 1)}));
    j["corr"] = cc;
    doc["records"].push_back(std::move(j));
  }
  write_text(path, doc.dump(2) + "\n");
}

PointCloud reconstruct_4dmatch_target(const FourDMatchRecord& rec) {
  rec.validate();
  const Eigen::Index m = rec.corr.rows();
  Points3<double> y(m, 3);
  for (Eigen::Index r = 0; r < m; ++r) {
    const Eigen::Index i = rec.corr(r, 0);
    y.row(r) = (rec.t + rec.R * (rec.X.row(i) + rec.D.row(i)).transpose()).transpose();
  }
  return PointCloud(std::move(y));
}

std::string overlap_label(double overlap) { return overlap > 0.45 ? "4DMatch" : "4DLoMatch"; }

RegistrationPair pair_from_4dmatch(const FourDMatchRecord& rec) {
  rec.validate();
  const Eigen::Index m = rec.corr.rows();
  RegistrationPair pair;
  pair.source.points.resize(m, 3);
  pair.field_gt.displacements.resize(m, 3);
  pair.correspondences.pairs.resize(m, 2);
  for (Eigen::Index r = 0; r < m; ++r) {
    const Eigen::Index i = rec.corr(r, 0);
    pair.source.points.row(r) = rec.X.row(i);
    pair.field_gt.displacements.row(r) = rec.D.row(i);
    pair.correspondences.pairs(r, 0) = static_cast<int>(r);
    pair.correspondences.pairs(r, 1) = static_cast<int>(r);
  }
  pair.target = reconstruct_4dmatch_target(rec);
  pair.rigid.rotation = rec.R;
  pair.rigid.translation = rec.t;
  pair.spec = ChallengeSpec{};
  return pair;
}

void export_colorized(const PointCloud& cloud, const std::string& channel, const fs::path& path) {
  cloud.validate();
  const auto it = cloud.attributes.find(channel);
  if (it == cloud.attributes.end()) throw ConfigError("export_colorized: unknown channel '" + channel + "'");
  const Eigen::VectorXd& v = it->second;
  const double lo = v.minCoeff(), hi = v.maxCoeff();
  const double span = hi - lo;

  std::string out;
  out += "ply\nformat ascii 1.0\n";
  out += "element vertex " + std::to_string(cloud.size()) + "\n";
  out += "property float x\nproperty float y\nproperty float z\n";
  out += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out += "end_header\n";
  char buf[128];
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    const double tv = span > 0.0 ? (v[i] - lo) / span : 0.0;
    const int red = static_cast<int>(std::lround(255.0 * (1.0 - tv)));
    const int blue = static_cast<int>(std::lround(255.0 * tv));
    std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g %d 0 %d\n", cloud.points(i, 0), cloud.points(i, 1),
                  cloud.points(i, 2), red, blue);
    out += buf;
  }
  write_text(path, out);
}

const Eigen::MatrixXd* ArrayStore::find(const std::string& name) const {
  for (const auto& [n, m] : arrays)
    if (n == name) return &m;
  return nullptr;
}

void write_arrays(const ArrayStore& store, const fs::path& path) {
  json doc;
  doc["format_version"] = 1;
  doc["meta"] = store.meta;
  json arrays = json::object();
  for (const auto& [name, mat] : store.arrays) {
    if (!mat.allFinite()) throw IoError("array store: non-finite values in '" + name + "'");
    json data = json::array();
    for (Eigen::Index r = 0; r < mat.rows(); ++r)
      for (Eigen::Index c = 0; c < mat.cols(); ++c) data.push_back(mat(r, c));
    arrays[name] = {{"shape", json::array({mat.rows(), mat.cols()})}, {"data", std::move(data)}};
  }
  doc["arrays"] = std::move(arrays);
  write_text(path, doc.dump() + "\n");
}

ArrayStore read_arrays(const fs::path& path) {
  json doc;
  try {
    doc = json::parse(read_text(path, "array store"));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  try {
    if (doc.at("format_version").get<int>() != 1)
      throw FormatError(path.string() + ": unsupported format_version");
    ArrayStore store;
    store.meta = doc.value("meta", json::object());
    for (const auto& [name, j] : doc.at("arrays").items()) {
      const auto& shape = j.at("shape");
      const auto rows = shape.at(0).get<Eigen::Index>();
      const auto cols = shape.at(1).get<Eigen::Index>();
      const auto& data = j.at("data");
      if (static_cast<Eigen::Index>(data.size()) != rows * cols)
        throw FormatError(path.string() + ": array '" + name + "' data does not match shape");
      Eigen::MatrixXd mat(rows, cols);
      std::size_t k = 0;
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) mat(r, c) = data[k++].get<double>();
      store.arrays.emplace_back(name, std::move(mat));
    }
    return store;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace defreg
