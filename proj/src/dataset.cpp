#include "popdyn/dataset.hpp"

#include <json.hpp>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace popdyn::data {

namespace fs = std::filesystem;
using nlohmann::json;

void SnapshotDataset::validate() const {
  if (snapshots.empty()) throw DataError("dataset: no snapshots");
  if (dim < 1) throw DataError("dataset: dimension must be >= 1");
  for (std::size_t t = 0; t < snapshots.size(); ++t)
    if (snapshots[t].cols() != dim)
      throw ShapeError("dataset: snapshot " + std::to_string(t) + " has " +
                       std::to_string(snapshots[t].cols()) + " columns, expected " +
                       std::to_string(dim));
  if (timestamps.size() != snapshots.size())
    throw DataError("dataset: timestamp count does not match snapshot count");
  for (std::size_t t = 1; t < timestamps.size(); ++t)
    if (!(timestamps[t] > timestamps[t - 1]))
      throw DataError("dataset: timestamps must be strictly increasing (index " +
                      std::to_string(t) + ")");
  if (!labels.empty()) {
    if (labels.size() != snapshots.size())
      throw DataError("dataset: label sequence count does not match snapshot count");
    for (std::size_t t = 0; t < labels.size(); ++t)
      if (static_cast<Index>(labels[t].size()) != snapshots[t].rows())
        throw DataError("dataset: snapshot " + std::to_string(t) +
                        " label count does not match its point count");
  }
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& field, const std::string& file, std::size_t line) {
  double v = 0.0;
  const char* b = field.data();
  const char* e = b + field.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc{} || p != e)
    throw DataError(file + ":" + std::to_string(line) + ": bad numeric field '" + field + "'");
  return v;
}

int parse_label(const std::string& field, const std::string& file, std::size_t line) {
  int v = 0;
  const char* b = field.data();
  const char* e = b + field.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc{} || p != e)
    throw DataError(file + ":" + std::to_string(line) + ": bad label field '" + field + "'");
  return v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

template <typename T>
T manifest_get(const json& j, const char* key, const std::string& file) {
  if (!j.contains(key)) throw DataError(file + ": manifest missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw DataError(file + ": manifest field '" + std::string(key) + "' has the wrong type");
  }
}

}  // namespace

void save_dataset(const SnapshotDataset& ds, const std::string& dir) {
  ds.validate();
  fs::create_directories(dir);

  json manifest;
  manifest["format_version"] = 1;
  manifest["name"] = ds.name;
  manifest["dim"] = ds.dim;
  manifest["snapshots"] = static_cast<long>(ds.snapshots.size());
  manifest["timestamps"] = ds.timestamps;
  manifest["generator"] = ds.generator;
  manifest["params"] =
      ds.params_json.empty() ? json::object() : json::parse(ds.params_json);
  manifest["seed"] = ds.seed;
  manifest["split"] = ds.split;
  manifest["has_labels"] = ds.has_labels();
  {
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw DataError("dataset: cannot write " + dir + "/manifest.json");
    out << manifest.dump(2) << "\n";
  }

  for (std::size_t t = 0; t < ds.snapshots.size(); ++t) {
    const Mat& cloud = ds.snapshots[t];
    fs::path p = fs::path(dir) / ("snapshot_" + std::to_string(t) + ".csv");
    std::ofstream out(p);
    if (!out) throw DataError("dataset: cannot write " + p.string());
    for (Index j = 0; j < ds.dim; ++j) out << (j ? "," : "") << "x" << j;
    if (ds.has_labels()) out << ",label";
    out << "\n";
    for (Index i = 0; i < cloud.rows(); ++i) {
      for (Index j = 0; j < ds.dim; ++j) out << (j ? "," : "") << fmt_double(cloud(i, j));
      if (ds.has_labels()) out << "," << ds.labels[t][static_cast<std::size_t>(i)];
      out << "\n";
    }
  }
}

SnapshotDataset load_dataset(const std::string& dir) {
  const std::string mpath = (fs::path(dir) / "manifest.json").string();
  std::ifstream min(mpath);
  if (!min) throw DataError("dataset: cannot open " + mpath);
  json manifest;
  try {
    min >> manifest;
  } catch (const json::exception& e) {
    throw DataError(mpath + ": invalid JSON: " + e.what());
  }

  SnapshotDataset ds;
  const int version = manifest_get<int>(manifest, "format_version", mpath);
  if (version != 1)
    throw DataError(mpath + ": unsupported format_version " + std::to_string(version));
  ds.name = manifest_get<std::string>(manifest, "name", mpath);
  ds.dim = manifest_get<Index>(manifest, "dim", mpath);
  const long count = manifest_get<long>(manifest, "snapshots", mpath);
  ds.timestamps = manifest_get<std::vector<double>>(manifest, "timestamps", mpath);
  ds.generator = manifest_get<std::string>(manifest, "generator", mpath);
  if (!manifest.contains("params")) throw DataError(mpath + ": manifest missing field 'params'");
  ds.params_json = manifest.at("params").dump();
  ds.seed = manifest_get<std::uint64_t>(manifest, "seed", mpath);
  ds.split = manifest_get<std::string>(manifest, "split", mpath);
  const bool has_labels = manifest_get<bool>(manifest, "has_labels", mpath);

  if (count < 1) throw DataError(mpath + ": snapshot count must be >= 1");

  for (long t = 0; t < count; ++t) {
    fs::path p = fs::path(dir) / ("snapshot_" + std::to_string(t) + ".csv");
    std::ifstream in(p);
    if (!in) throw DataError("dataset: cannot open " + p.string());
    std::string line;
    std::size_t lineno = 0;
    if (!std::getline(in, line))
      throw DataError(p.string() + ": empty file (missing header)");
    ++lineno;
    std::vector<std::string> header = split_csv(line);
    const std::size_t want = static_cast<std::size_t>(ds.dim) + (has_labels ? 1 : 0);
    if (header.size() != want)
      throw DataError(p.string() + ":1: header has " + std::to_string(header.size()) +
                      " fields, expected " + std::to_string(want));
    if (has_labels && header.back() != "label")
      throw DataError(p.string() + ":1: last header field must be 'label'");

    std::vector<std::vector<double>> rows;
    std::vector<int> labs;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::vector<std::string> fields = split_csv(line);
      if (fields.size() != want)
        throw DataError(p.string() + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(want) + " fields, got " + std::to_string(fields.size()));
      std::vector<double> row(static_cast<std::size_t>(ds.dim));
      for (Index j = 0; j < ds.dim; ++j)
        row[static_cast<std::size_t>(j)] =
            parse_double(fields[static_cast<std::size_t>(j)], p.string(), lineno);
      rows.push_back(std::move(row));
      if (has_labels) labs.push_back(parse_label(fields.back(), p.string(), lineno));
    }
    Mat cloud(static_cast<Index>(rows.size()), ds.dim);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (Index j = 0; j < ds.dim; ++j)
        cloud(static_cast<Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
    ds.snapshots.push_back(std::move(cloud));
    if (has_labels) ds.labels.push_back(std::move(labs));
  }

  ds.validate();
  return ds;
}

}  // namespace popdyn::data
