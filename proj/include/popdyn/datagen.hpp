#pragma once

// Synthetic population data: Euler-Maruyama flows under a potential's drift,
// Gaussian clouds carried along parametric plane curves, and point-level
// corruption. Every generator is a pure function of its seed.

#include "popdyn/common.hpp"
#include "popdyn/dataset.hpp"

#include <functional>
#include <string>
#include <vector>

namespace popdyn::data {

// Drift field of a potential flow: drift(x) = -grad Phi(x).
struct DriftSpec {
  enum class Kind {
    quadratic,              // Phi(x) = |x|^2, drift -2x
    styblinski,             // Phi(x) = sum_j (3 x_j^3 - 32 x_j + 5)^2, per coordinate
    styblinski_classical,   // Phi(x) = 1/2 sum_j (x_j^4 - 16 x_j^2 + 5 x_j)
    custom,                 // user-supplied drift callback
  };
  Kind kind = Kind::quadratic;
  std::function<Mat(const Mat&)> custom_drift;  // used only for Kind::custom

  Mat drift(const Mat& x) const;
  static Kind parse_kind(const std::string& name);
};

// X <- X + drift(X) * dt + N(0, sd^2) * sqrt(dt), one row per particle,
// independent noise per point and coordinate. Returns n_steps + 1 clouds,
// the first being X0 itself.
std::vector<Mat> euler_maruyama(const DriftSpec& drift, const Mat& x0, double dt, double sd,
                                int n_steps, std::uint64_t seed);

struct PotentialOptions {
  Index dim = 2;
  double init_scale = 1.5;  // initial cloud: init_scale * standard normal + offset
  Vec offset;               // empty means zero
  bool classical_styblinski = false;
};

// Potential-flow datasets: quadratic (dt=0.25, sd=0.2, 4 transitions) or
// styblinski (dt=0.06, sd=0.4, 8 transitions).
SnapshotDataset make_potential_dataset(const std::string& kind, Index n_points,
                                       std::uint64_t seed, const PotentialOptions& opt = {});

// Gaussian clouds following a plane curve: semicircle (r=10, 5 transitions),
// spiral (r 10 -> 1, 10 transitions), line (x -10 -> -2.5, 2 transitions;
// the test split shifts x to [-5, 7.5]). Cloud = center + N(0, point_sd^2 I).
SnapshotDataset make_trajectory_dataset(const std::string& kind, Index n_points, double point_sd,
                                        std::uint64_t seed, const std::string& split = "train");

// Centers of the trajectory datasets (T+1 rows, 2 columns), exposed so tests
// and tooling can check clouds against the analytic curves.
Mat trajectory_centers(const std::string& kind, const std::string& split = "train");

// Shift ceil(fraction * n) uniformly chosen points of every snapshot by a
// uniform draw in [-noise_scale, noise_scale] per coordinate.
SnapshotDataset corrupt(const SnapshotDataset& ds, double fraction, double noise_scale,
                        std::uint64_t seed);

}  // namespace popdyn::data
