#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "mixnoise/clusterkit.hpp"
#include "mixnoise/error.hpp"
#include "mixnoise/extended_matrix.hpp"
#include "mixnoise/netcore.hpp"
#include "mixnoise/synthdata.hpp"
#include "mixnoise/transition.hpp"

namespace mixnoise::io {

namespace fs = std::filesystem;
using nlohmann::json;

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex_digest(const std::string& bytes) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(bytes);
  return os.str();
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("cannot read " + path.string(), path.filename().string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline std::string file_digest(const fs::path& path) { return hex_digest(read_text(path)); }

/// Writes the whole file or throws; the parent directory is created.
inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
  if (!out) throw ConfigError("short write to " + path.string());
}

/// Throws a dependency error naming the missing artifact.
inline void require(const fs::path& path, const std::string& stage) {
  if (!fs::exists(path)) {
    throw DependencyError(stage + " needs " + path.filename().string() + " (run the upstream stage first; looked for " +
                              path.string() + ")",
                          path.filename().string());
  }
}

/// Decimal with 17 significant digits: round-trips every double.
inline std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, const std::string& where) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ConfigError("malformed number '" + s + "' in " + where);
  }
  return v;
}

inline long parse_int(const std::string& s, const std::string& where) {
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ConfigError("malformed integer '" + s + "' in " + where);
  }
  return v;
}

/// Rows of a headed CSV file (header dropped).
inline std::vector<std::vector<std::string>> read_csv_rows(const fs::path& path,
                                                           std::vector<std::string>* header = nullptr) {
  std::istringstream in(read_text(path));
  std::string line;
  std::vector<std::vector<std::string>> rows;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (first) {
      if (header) *header = split_csv_line(line);
      first = false;
      continue;
    }
    if (line.empty()) continue;
    rows.push_back(split_csv_line(line));
  }
  if (first) throw ConfigError(path.string() + " is empty");
  return rows;
}

// ---- matrices ----

inline json to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const json& j, Eigen::Index cols_if_empty = 0) {
  if (!j.is_array()) throw ConfigError("matrix must be a JSON array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j[0].size()) : cols_if_empty;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (static_cast<Eigen::Index>(row.size()) != cols) throw ShapeError("ragged matrix in JSON");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

inline json to_json(const Eigen::VectorXd& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

inline Eigen::VectorXd vector_from_json(const json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

inline json parse_json_file(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

// ---- datasets ----

/// Directory layout: features.csv (x0..x{d-1}), labels.csv (clean,noisy,split),
/// meta.json (c, d, n plus caller extras).
inline void write_dataset(const fs::path& dir, const Dataset& data, const json& extra = json::object()) {
  data.validate();
  std::string features;
  for (int j = 0; j < data.dim(); ++j) features += (j ? ",x" : "x") + std::to_string(j);
  features += "\n";
  for (Eigen::Index i = 0; i < data.features.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.features.cols(); ++j) {
      if (j) features += ',';
      features += fmt(data.features(i, j));
    }
    features += '\n';
  }
  write_text(dir / "features.csv", features);
  std::string labels = "clean,noisy,split\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    labels += std::to_string(data.clean_labels[i]) + "," + std::to_string(data.noisy_labels[i]) + "," +
              to_string(data.split[i]) + "\n";
  }
  write_text(dir / "labels.csv", labels);
  json meta = extra;
  meta["c"] = data.c;
  meta["d"] = data.dim();
  meta["n"] = data.size();
  write_json(dir / "meta.json", meta);
}

inline Eigen::MatrixXd read_feature_csv(const fs::path& path) {
  const auto rows = read_csv_rows(path);
  const auto cols = rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size());
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (static_cast<Eigen::Index>(rows[i].size()) != cols) {
      throw ShapeError(path.string() + ": ragged row " + std::to_string(i + 2));
    }
    for (Eigen::Index j = 0; j < cols; ++j) {
      m(static_cast<Eigen::Index>(i), j) = parse_double(rows[i][static_cast<std::size_t>(j)], path.string());
    }
  }
  return m;
}

inline void write_feature_csv(const fs::path& path, const Eigen::MatrixXd& m) {
  std::string out;
  for (Eigen::Index j = 0; j < m.cols(); ++j) out += (j ? ",x" : "x") + std::to_string(j);
  out += "\n";
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) out += ',';
      out += fmt(m(i, j));
    }
    out += '\n';
  }
  write_text(path, out);
}

inline Dataset read_dataset(const fs::path& dir, const std::string& stage) {
  for (const char* f : {"features.csv", "labels.csv", "meta.json"}) require(dir / f, stage);
  const auto meta = parse_json_file(dir / "meta.json");
  Dataset data;
  data.c = meta.at("c").get<int>();
  data.features = read_feature_csv(dir / "features.csv");
  for (const auto& row : read_csv_rows(dir / "labels.csv")) {
    if (row.size() != 3) throw ShapeError("labels.csv rows need clean,noisy,split");
    data.clean_labels.push_back(static_cast<Label>(parse_int(row[0], "labels.csv")));
    data.noisy_labels.push_back(static_cast<Label>(parse_int(row[1], "labels.csv")));
    data.split.push_back(split_from_string(row[2]));
  }
  data.validate();
  return data;
}

// ---- models ----

inline json to_json(const ClassifierParams& p) {
  json layers = json::array();
  for (const auto& l : p.layers) layers.push_back({{"weight", to_json(l.weight)}, {"bias", to_json(l.bias)}});
  return {{"activation", to_string(p.activation)}, {"layers", layers}};
}

inline ClassifierParams params_from_json(const json& j) {
  ClassifierParams p;
  p.activation = activation_from_string(j.at("activation").get<std::string>());
  for (const auto& l : j.at("layers")) {
    p.layers.push_back({matrix_from_json(l.at("weight")), vector_from_json(l.at("bias"))});
  }
  p.validate();
  return p;
}

inline void write_model(const fs::path& path, const ClassifierParams& p) { write_json(path, to_json(p)); }

inline ClassifierParams read_model(const fs::path& path, const std::string& stage) {
  require(path, stage);
  try {
    return params_from_json(parse_json_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("malformed model in " + path.string() + ": " + e.what());
  }
}

// ---- clusterings and transition matrices ----

inline json to_json(const ClusterModel& m) {
  json j = {{"centroids", to_json(m.centroids)}, {"loss", m.loss}, {"sizes", m.sizes()},
            {"assignment", m.assignment}, {"point_ids", m.point_ids}};
  j["meta_cluster"] = m.meta_cluster ? json(*m.meta_cluster) : json(nullptr);
  j["class_of_cluster"] = m.class_of_cluster ? json(*m.class_of_cluster) : json(nullptr);
  return j;
}

inline ClusterModel cluster_from_json(const json& j) {
  ClusterModel m;
  m.centroids = matrix_from_json(j.at("centroids"));
  m.loss = j.at("loss").get<double>();
  m.assignment = j.at("assignment").get<std::vector<std::size_t>>();
  m.point_ids = j.at("point_ids").get<std::vector<std::size_t>>();
  if (!j.at("meta_cluster").is_null()) m.meta_cluster = j["meta_cluster"].get<std::size_t>();
  if (!j.at("class_of_cluster").is_null()) m.class_of_cluster = j["class_of_cluster"].get<std::vector<Label>>();
  return m;
}

inline json to_json(const ExtendedTransitionMatrix& t) {
  json j = {{"entries", to_json(t.entries)}, {"origin", to_string(t.origin)}};
  j["cluster_id"] = t.cluster_id ? json(*t.cluster_id) : json(nullptr);
  j["fallback_rows"] = t.fallback_rows;
  return j;
}

inline ExtendedTransitionMatrix matrix_record_from_json(const json& j) {
  ExtendedTransitionMatrix t(matrix_from_json(j.at("entries")), origin_from_string(j.at("origin").get<std::string>()));
  if (!j.at("cluster_id").is_null()) t.cluster_id = j["cluster_id"].get<std::size_t>();
  t.fallback_rows = j.at("fallback_rows").get<std::vector<bool>>();
  t.validate();
  return t;
}

/// Matrices plus the coarse centroids that route examples to them.
inline json to_json(const TransitionBundle& b) {
  json mats = json::array();
  for (const auto& t : b.matrices) mats.push_back(to_json(t));
  return {{"k", b.k()}, {"space", to_string(b.space)}, {"coarse_centroids", to_json(b.coarse.centroids)},
          {"matrices", mats}};
}

inline TransitionBundle bundle_from_json(const json& j) {
  TransitionBundle b;
  b.space = feature_space_from_string(j.at("space").get<std::string>());
  b.coarse.centroids = matrix_from_json(j.at("coarse_centroids"));
  for (const auto& m : j.at("matrices")) b.matrices.push_back(matrix_record_from_json(m));
  b.validate();
  return b;
}

inline TransitionBundle read_bundle(const fs::path& path, const std::string& stage) {
  require(path, stage);
  try {
    return bundle_from_json(parse_json_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("malformed transition file " + path.string() + ": " + e.what());
  }
}

// ---- training and evaluation artifacts ----

inline void write_history(const fs::path& path, const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,val_loss,floor_rate,lr\n";
  for (const auto& h : history) {
    out += std::to_string(h.epoch) + "," + fmt(h.train_loss) + "," + fmt(h.val_loss) + "," + fmt(h.floor_rate) +
           "," + fmt(h.lr) + "\n";
  }
  write_text(path, out);
}

inline void write_predictions(const fs::path& path, const std::vector<std::size_t>& index,
                              const std::vector<Label>& predicted, const std::vector<Label>& truth) {
  if (index.size() != predicted.size() || index.size() != truth.size()) {
    throw ShapeError("predictions columns have inconsistent lengths");
  }
  std::string out = "index,predicted,true\n";
  for (std::size_t i = 0; i < index.size(); ++i) {
    out += std::to_string(index[i]) + "," + std::to_string(predicted[i]) + "," + std::to_string(truth[i]) + "\n";
  }
  write_text(path, out);
}

// ---- provenance ----

struct ManifestRecord {
  std::string stage;
  std::string config_digest;
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;
  /// Artifact file name -> content digest.
  std::vector<std::pair<std::string, std::string>> outputs;
};

inline std::string git_describe() {
#ifdef MIXNOISE_GIT_DESCRIBE
  return MIXNOISE_GIT_DESCRIBE;
#else
  return "unknown";
#endif
}

/// Appends one JSON line; earlier lines are never rewritten.
inline void append_manifest(const fs::path& dir, const ManifestRecord& r) {
  json outputs = json::object();
  for (const auto& [name, digest] : r.outputs) outputs[name] = digest;
  json line = {{"stage", r.stage},
               {"config_digest", r.config_digest},
               {"seed", r.seed},
               {"git", git_describe()},
               {"wall_seconds", r.wall_seconds},
               {"outputs", outputs}};
  fs::create_directories(dir);
  std::ofstream out(dir / "manifest.jsonl", std::ios::app);
  if (!out) throw ConfigError("cannot append to " + (dir / "manifest.jsonl").string());
  out << line.dump() << "\n";
}

}  // namespace mixnoise::io
