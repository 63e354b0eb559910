#pragma once

// One proximal step of the population: fit the convex potential whose
// gradient map balances the energy drop of the pushed cloud against the mean
// squared displacement from the current cloud, then apply the map. The inner
// fit runs Adam under a fixed-point stopping rule; in unrolled mode every
// inner update is recorded so the step output can be differentiated w.r.t.
// whatever parameters the energy closure reads.

#include "popdyn/adam.hpp"
#include "popdyn/autodiff.hpp"
#include "popdyn/common.hpp"
#include "popdyn/icnn.hpp"

#include <functional>
#include <vector>

namespace popdyn::jko {

using ad::Var;

// Mean energy of a cloud (n x d -> 1 x 1), recorded on the active tape. The
// closure owns whatever parameters the energy reads (taped leaves when those
// should receive gradients).
using EnergyFn = std::function<Var(const Var& cloud)>;

struct JkoConfig {
  double tau = 1.0;   // proximal step weight
  double ell = 0.0;   // strong-convexity augmentation of the map
  double lr_theta = 0.01;
  double beta1 = 0.5;
  double beta2 = 0.9;
  int min_iters = 50;
  int max_iters = 100;
  double alpha = 1.0;  // average-gradient-norm stopping tolerance
  bool unroll = false;
  // When > 0, run exactly this many updates and ignore the stopping rule
  // (keeps the map smooth in the energy parameters for derivative checks).
  int fixed_iters = 0;

  void validate() const;
  optim::AdamConfig adam() const { return {lr_theta, beta1, beta2, 1e-8, 1e-12}; }
};

struct JkoStepResult {
  Mat rho_next;
  Var rho_next_var;  // defined only in unrolled mode; lives on the caller's tape
  icnn::IcnnParams theta_star;
  std::vector<double> objective_trace;  // objective before each update
  double final_metric = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Energy of the pushed cloud plus (1/2tau) * mean squared displacement; every
// term is recorded on `tape` (which must be the active scope).
Var jko_objective(ad::Tape& tape, const icnn::IcnnVars& theta, const EnergyFn& energy,
                  const Var& nu, double tau, double ell);

// Sum of block L2 norms over the total parameter count.
double convergence_metric(const std::vector<Mat>& block_grads);

// Run the inner fit from theta0 and push nu through the fitted map. Plain
// mode manages its own tapes; unrolled mode records everything on the active
// tape (required) and also returns rho_next_var.
JkoStepResult jko_step(const EnergyFn& energy, const Mat& nu, const icnn::IcnnParams& theta0,
                       const JkoConfig& cfg);

}  // namespace popdyn::jko
