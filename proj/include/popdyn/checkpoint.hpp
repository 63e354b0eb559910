#pragma once

// Self-describing model container: a text magic line, a length-prefixed JSON
// manifest (kind, seed, step, config echo, array shapes), then the parameter
// matrices as raw column-major float64 little-endian blocks in manifest order.
// No timestamps or environment data: identical models produce identical bytes.

#include <cstdint>
#include <optional>
#include <string>

#include "popdyn/common.hpp"
#include "popdyn/energy.hpp"
#include "popdyn/icnn.hpp"

namespace popdyn::ckpt {

struct Checkpoint {
  std::string kind;         // "jkonet" | "forward"
  std::uint64_t seed = 0;
  long step = 0;            // outer updates applied so far
  std::string config_json;  // opaque echo of the run configuration ("{}" ok)
  energy::EnergyParams xi;
  std::optional<icnn::IcnnParams> theta;  // last inner solution, when retained
};

// Writes the container. Unknown kind or malformed config_json is a
// ConfigError; filesystem failures are DataError.
void save_checkpoint(const Checkpoint& c, const std::string& path);

// Reads and validates a container written by save_checkpoint. Wrong magic,
// truncation, trailing bytes, or shape mismatches are DataError.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace popdyn::ckpt
