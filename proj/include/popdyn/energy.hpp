#pragma once

// Parametric free energy: a plain MLP potential over points, averaged over a
// cloud to score the population. The same architecture doubles as the
// baseline's explicit potential (see forward_model).

#include "popdyn/autodiff.hpp"
#include "popdyn/common.hpp"

#include <cstdint>
#include <vector>

namespace popdyn::energy {

using ad::Var;

// Hidden widths plus the final scalar output (softplus on hidden layers,
// linear output).
struct MlpShape {
  Index input_dim = 2;
  std::vector<Index> widths = {64, 64, 1};

  Index depth() const { return static_cast<Index>(widths.size()); }
  void validate() const;
};

struct EnergyParams {
  MlpShape shape;
  std::vector<Mat> w;  // layer l: fan_in x widths[l]
  std::vector<Mat> b;  // 1 x widths[l]
};

struct EnergyVars {
  MlpShape shape;
  std::vector<Var> w;
  std::vector<Var> b;

  static EnergyVars from(const EnergyParams& p);
  static EnergyVars constants(const EnergyParams& p);
  std::vector<Var> flat() const;  // w..., b...
  static EnergyVars from_flat(const MlpShape& shape, const std::vector<Var>& blocks);
  EnergyParams to_params() const;
};

// Weights ~ N(0, 0.1^2), biases zero; hidden widths fixed at 64, 64.
EnergyParams init_energy(Index input_dim, std::uint64_t seed);

// Pointwise energies over a batch: x is n x input_dim, result n x 1.
Var eval(const EnergyVars& v, const Var& x);

// Mean energy of a uniform empirical cloud: 1 x 1.
Var of_measure(const EnergyVars& v, const Var& cloud);

// Row-wise input gradient d E/d x, differentiable w.r.t. the weights when
// create_graph is set. Requires an active scope on `tape`.
Var gradient_map(ad::Tape& tape, const EnergyVars& v, const Var& x, bool create_graph);

// Plain (untaped) conveniences.
Vec values(const EnergyParams& p, const Mat& x);
double of_measure(const EnergyParams& p, const Mat& cloud);
Mat gradient_map(const EnergyParams& p, const Mat& x);

}  // namespace popdyn::energy
