#pragma once

// Input-convex neural network psi(x): scalar potential, convex in x by
// construction (nonnegative latent weights, convex nondecreasing activations
// past the first layer). Its input gradient, optionally augmented by ell*x
// for strong convexity, is the candidate transport map applied row-wise to
// point clouds.

#include "popdyn/autodiff.hpp"
#include "popdyn/common.hpp"

#include <cstdint>
#include <vector>

namespace popdyn::icnn {

using ad::Var;

// Layer widths including the final scalar output.
struct IcnnShape {
  Index input_dim = 2;
  std::vector<Index> widths = {64, 64, 64, 1};
  double beta = 0.2;  // leaky slope shared by all activations

  Index depth() const { return static_cast<Index>(widths.size()); }
  void validate() const;
  static IcnnShape make(Index input_dim, Index hidden_width = 64, Index depth = 4,
                        double beta = 0.2);
};

// theta. Layer l reads the raw input through wx[l] (input_dim x widths[l]);
// layers l >= 1 also read the previous latent through wz[l-1]
// (widths[l-1] x widths[l], entries kept >= 0). Biases are 1 x widths[l] rows.
struct IcnnParams {
  IcnnShape shape;
  std::vector<Mat> wx;
  std::vector<Mat> wz;
  std::vector<Mat> b;
};

// Gradient-tracked mirror of IcnnParams for taped evaluation.
struct IcnnVars {
  IcnnShape shape;
  std::vector<Var> wx;
  std::vector<Var> wz;
  std::vector<Var> b;

  static IcnnVars from(const IcnnParams& p);       // leaves that take gradients
  static IcnnVars constants(const IcnnParams& p);  // frozen weights

  // Canonical block order: wx..., wz..., b... (used by optimizers and
  // serialization).
  std::vector<Var> flat() const;
  static IcnnVars from_flat(const IcnnShape& shape, const std::vector<Var>& blocks);
  IcnnParams to_params() const;
};

// Weights ~ N(0, 0.1^2) with wz clamped to >= 0; biases zero. Deterministic in
// the seed.
IcnnParams init_icnn(const IcnnShape& shape, std::uint64_t seed);

// psi over a batch: x is n x input_dim, result n x 1. First layer activation
// is the squared leaky relu, remaining layers the leaky relu.
Var forward(const IcnnVars& v, const Var& x);

// Row-wise T(x) = d psi/d x + ell*x as a taped value. Requires an active tape
// scope on `tape`; with create_graph the result stays differentiable w.r.t.
// the network weights (and x).
Var gradient_map(ad::Tape& tape, const IcnnVars& v, const Var& x, double ell,
                 bool create_graph);

// Plain (untaped) conveniences.
Vec values(const IcnnParams& p, const Mat& x);
Mat gradient_map(const IcnnParams& p, const Mat& x, double ell);
Mat pushforward(const IcnnParams& p, const Mat& cloud, double ell);

// Clamp wz at zero. The Var form rebuilds wz blocks through relu so a
// projection inside an unrolled optimizer stays on the tape.
void project_nonnegative(IcnnParams& p);
IcnnVars project_nonnegative(const IcnnVars& v);

// lambda * sum_l ||max(-wz_l, 0)||_F^2: soft alternative to projection
// (off by default everywhere).
double convexity_penalty(const IcnnParams& p, double lambda);

}  // namespace popdyn::icnn
