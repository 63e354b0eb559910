#pragma once

// Snapshot sequences of particle populations, plus their on-disk form: a
// directory holding manifest.json and one delimited-text file per snapshot.
// Serialization is bit-exact for doubles (shortest round-trip printing).

#include "popdyn/common.hpp"

#include <string>
#include <vector>

namespace popdyn::data {

struct SnapshotDataset {
  std::string name;
  Index dim = 0;
  std::vector<Mat> snapshots;                // each cloud is n_t x dim
  std::vector<double> timestamps;            // strictly increasing, one per snapshot
  std::vector<std::vector<int>> labels;      // empty, or one label vector per snapshot
  std::string generator;                     // producing recipe, e.g. "quadratic"
  std::string params_json;                   // generator parameter echo (JSON object)
  std::uint64_t seed = 0;
  std::string split;                         // "train", "test", or empty

  bool has_labels() const { return !labels.empty(); }
  Index transitions() const { return static_cast<Index>(snapshots.size()) - 1; }
  void validate() const;
};

// Write `ds` into directory `dir` (created if absent): manifest.json plus
// snapshot_<t>.csv with header x0,...,x{d-1}[,label].
void save_dataset(const SnapshotDataset& ds, const std::string& dir);

// Inverse of save_dataset. Malformed input raises DataError naming the file,
// line, and field at fault.
SnapshotDataset load_dataset(const std::string& dir);

}  // namespace popdyn::data
