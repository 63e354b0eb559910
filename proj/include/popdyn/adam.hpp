#pragma once

// Adam in two interchangeable forms built on one update formula: a taped form
// whose updates are recorded (so an optimization trajectory can itself be
// differentiated) and a plain form for ordinary descent. The second moment is
// offset inside the square root (eps_root) so the backward pass of the taped
// form stays finite at v = 0.

#include "popdyn/autodiff.hpp"
#include "popdyn/common.hpp"

#include <vector>

namespace popdyn::optim {

using ad::Var;

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.5;
  double beta2 = 0.9;
  double eps = 1e-8;
  double eps_root = 1e-12;

  void validate() const;
};

// Moment estimates as taped values. Fresh state starts at step 0 with zero
// moments (allocated lazily on the first update).
struct AdamVarState {
  std::vector<Var> m, v;
  int step = 0;
};

// One update for a list of parameter blocks; returns the new blocks and
// advances the state. Records on the active tape whenever params/grads are
// gradient-tracked.
std::vector<Var> adam_step(AdamVarState& state, const std::vector<Var>& params,
                           const std::vector<Var>& grads, const AdamConfig& cfg);

// Plain form over raw matrices (same arithmetic, evaluated eagerly).
struct AdamState {
  std::vector<Mat> m, v;
  int step = 0;
};

void adam_step(AdamState& state, std::vector<Mat>& params, const std::vector<Mat>& grads,
               const AdamConfig& cfg);

}  // namespace popdyn::optim
