#pragma once

// Entropy-regularized optimal transport between discrete measures.
//
// Conventions: point clouds are rows-as-points (n x d); the ground cost is
// squared Euclidean distance; the regularized objective is
//   W_eps(mu, nu) = min_P <P, C> - eps * H(P),  H(P) = -sum_ij P_ij (log P_ij - 1),
// whose optimum has the form P = exp((f_i + g_j - C_ij) / eps) for dual
// potentials (f, g). All iterations run in the log domain, so small eps is
// safe. Everything here is plain Eigen math (no tape); gradient flow into the
// rest of the system happens through explicit envelope-style position
// gradients with couplings held fixed.

#include "popdyn/common.hpp"

namespace popdyn::ot {

// Weighted point cloud. Weights are nonnegative and sum to one (1e-12).
struct DiscreteMeasure {
  Mat points;   // n x d
  Vec weights;  // n

  static DiscreteMeasure uniform(Mat pts);
  static DiscreteMeasure weighted(Mat pts, Vec w);  // validates
  Index size() const { return points.rows(); }
  Index dim() const { return points.cols(); }
};

struct SinkhornConfig {
  double marginal_tol = 1e-6;
  int max_iter = 2000;
};

struct SinkhornResult {
  Mat coupling;      // n x m, nonnegative
  double value;      // <P, C> - eps * H(P) on the returned coupling
  Vec f, g;          // dual potentials
  int iterations;    // completed update rounds
  bool converged;    // marginal violation <= tol within max_iter
};

// C_ij = ||x_i - y_j||^2, computed per entry (exact, symmetric, zero diagonal
// when the arguments alias the same cloud).
Mat pairwise_sq_cost(const Mat& x, const Mat& y);

// Log-domain Sinkhorn. Requires eps > 0 (ConfigError) and strictly positive
// weights (DataError): zero-mass support points must be dropped by the caller.
// Non-convergence is reported through the flag, never silently patched.
SinkhornResult sinkhorn(const DiscreteMeasure& mu, const DiscreteMeasure& nu, double eps,
                        const SinkhornConfig& cfg = {});

// W_eps(mu,nu) - (W_eps(mu,mu) + W_eps(nu,nu)) / 2. Throws NumericError if any
// subproblem fails to converge (the value would be unreliable).
double sinkhorn_divergence(const DiscreteMeasure& mu, const DiscreteMeasure& nu, double eps,
                           const SinkhornConfig& cfg = {});

// Gradient of sinkhorn_divergence with respect to mu.points (n x d), holding
// the optimal couplings fixed (envelope/Danskin rule). The W(mu,mu) term
// contributes through both of its marginals. Throws NumericError if a
// subproblem fails to converge.
Mat sinkhorn_grad_positions(const DiscreteMeasure& mu, const DiscreteMeasure& nu, double eps,
                            const SinkhornConfig& cfg = {});

// Divergence value and position gradient from one set of solves.
struct DivergenceWithGrad {
  double value;
  Mat grad;  // n x d w.r.t. mu.points
};
DivergenceWithGrad sinkhorn_divergence_with_grad(const DiscreteMeasure& mu,
                                                 const DiscreteMeasure& nu, double eps,
                                                 const SinkhornConfig& cfg = {});

// Exact squared 2-Wasserstein distance between uniform clouds of equal size by
// assignment enumeration. Rejects n != m and n > 8 (ShapeError).
double exact_w2_small(const Mat& x, const Mat& y);

}  // namespace popdyn::ot
