#pragma once

// Explicit forward baseline: the population is pushed directly through the
// gradient of an unconstrained MLP potential (same architecture as the
// learned energy) and that potential is fitted with the same outer Sinkhorn
// loop as the proximal model, minus the inner solve. The push replaces each
// point by the gradient itself — not a residual update — so no spatial
// regularity is imposed on the map; that lack of structure is the point of
// contrast with the convex-potential model.

#include <vector>

#include "popdyn/common.hpp"
#include "popdyn/dataset.hpp"
#include "popdyn/energy.hpp"
#include "popdyn/trainer.hpp"

namespace popdyn::fwd {

struct ForwardModel {
  energy::EnergyParams xi;
  train::TrainConfig config;
  bool fitted = false;
};

struct ForwardTrainResult {
  ForwardModel model;
  energy::EnergyParams best_xi;
  double best_loss = 0.0;
  long best_step = 0;
  std::vector<train::TrainStepLog> log;
};

// Each point x is replaced by grad F(x); rows are independent.
Mat forward_step(const energy::EnergyParams& xi, const Mat& cloud);

// Clipped gradient of the Sinkhorn divergence between (grad F)#nu and mu_next
// with respect to the potential parameters. Single-level: inner_iterations is
// 0, inner_converged true, theta_star empty.
train::OuterGradient forward_gradient(const energy::EnergyParams& xi, const Mat& nu,
                                      const Mat& mu_next, const train::TrainConfig& cfg);

// Same loop shape, seeds, batching, clipping, and checkpoint protocol as the
// proximal trainer; checkpoints carry kind "forward" and no inner map.
ForwardTrainResult train_forward(const std::vector<data::SnapshotDataset>& trajectories,
                                 const train::TrainConfig& cfg,
                                 const train::CheckpointSink& sink = {});

// Rollout semantics identical to the proximal model's predict_trajectory.
std::vector<Mat> predict_trajectory(const ForwardModel& model, const Mat& mu0, int T,
                                    train::PredictMode mode, const std::vector<Mat>& truths = {},
                                    bool allow_unfitted = false);

}  // namespace popdyn::fwd
