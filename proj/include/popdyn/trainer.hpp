#pragma once

// Outer fitting loop: descend the energy parameters against the Sinkhorn
// divergence between one proximal-step prediction and the observed next
// snapshot, one update per transition, with teacher forcing, global-norm
// clipping, and checkpoint callbacks. The gradient chains the divergence's
// position gradient through the unrolled inner fit.
//
// RNG streams derived from cfg.seed: 0 -> energy init, 1 -> inner-map init
// (re-derived identically at every transition), 2 -> mini-batch subsampling.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "popdyn/adam.hpp"
#include "popdyn/checkpoint.hpp"
#include "popdyn/common.hpp"
#include "popdyn/dataset.hpp"
#include "popdyn/energy.hpp"
#include "popdyn/icnn.hpp"
#include "popdyn/jko.hpp"
#include "popdyn/ot.hpp"

namespace popdyn::train {

struct TrainConfig {
  double lr_xi = 1e-3;
  double beta1 = 0.5;
  double beta2 = 0.9;
  Index batch_size = 250;  // points subsampled per cloud when larger
  int epochs = 1;
  bool teacher_forcing = true;
  bool warm_start = false;  // reuse the previous inner solution as theta0
  double clip_norm = 10.0;  // global-norm bound on the outer gradient
  double eps = 1.0;         // Sinkhorn regularization of the outer loss
  std::uint64_t seed = 0;
  Index hidden_width = 64;  // inner map architecture
  Index icnn_depth = 4;
  jko::JkoConfig jko;       // inner solver; unroll forced on for gradients
  ot::SinkhornConfig sinkhorn{1e-6, 20000};
  int checkpoint_every = 0;  // 0: only the final checkpoint goes to the sink

  TrainConfig() { jko.unroll = true; }
  void validate() const;
  optim::AdamConfig adam() const { return {lr_xi, beta1, beta2, 1e-8, 1e-12}; }
  icnn::IcnnShape inner_shape(Index input_dim) const {
    return icnn::IcnnShape::make(input_dim, hidden_width, icnn_depth);
  }
};

// Serialize to/from a JSON object; from_json starts at defaults and overrides
// the provided keys (unknown keys are a ConfigError).
std::string to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

struct JkonetModel {
  energy::EnergyParams xi;
  TrainConfig config;
  bool fitted = false;
};

struct TrainStepLog {
  int epoch = 0;
  int trajectory = 0;
  int transition = 0;
  double loss = 0.0;       // Sinkhorn divergence before the update
  double grad_norm = 0.0;  // global norm before clipping
  int inner_iterations = 0;
  bool inner_converged = false;
};

struct TrainResult {
  JkonetModel model;
  energy::EnergyParams best_xi;  // parameters that produced best_loss
  double best_loss = 0.0;
  long best_step = 0;  // 1-based outer step index
  std::vector<TrainStepLog> log;
};

// Receives periodic and final checkpoints; the library itself never touches
// the filesystem during training.
using CheckpointSink = std::function<void(const ckpt::Checkpoint&)>;

// Scales blocks so their joint L2 norm is at most max_norm; returns the norm
// before clipping.
double clip_global_norm(std::vector<Mat>& blocks, double max_norm);

struct OuterGradient {
  std::vector<Mat> blocks;  // clipped, in energy flat order (w..., b...)
  double loss = 0.0;
  double raw_norm = 0.0;  // global norm before clipping
  int inner_iterations = 0;
  bool inner_converged = false;
  icnn::IcnnParams theta_star;
};

// One bilevel gradient: unrolled proximal step from nu, divergence against
// mu_next, position gradient chained back to the energy parameters, clipped.
// Requires cfg.jko.unroll (ConfigError otherwise).
OuterGradient outer_gradient(const energy::EnergyParams& xi, const icnn::IcnnParams& theta0,
                             const Mat& nu, const Mat& mu_next, const TrainConfig& cfg);

// Fits the energy on a collection of snapshot trajectories (Algorithm: one
// update per transition per trajectory per epoch). Aborts with NumericError
// on a non-finite loss; checkpoints already sent to the sink are retained.
TrainResult train_jkonet(const std::vector<data::SnapshotDataset>& trajectories,
                         const TrainConfig& cfg, const CheckpointSink& sink = {});

enum class PredictMode { one_step, all_steps };
PredictMode parse_predict_mode(const std::string& name);

// Rolls the model forward T transitions. all_steps feeds each prediction back
// in; one_step conditions step t on truths[t] (required, size >= T). Returns
// T + 1 clouds starting at mu0. Unfitted models require allow_unfitted.
std::vector<Mat> predict_trajectory(const JkonetModel& model, const Mat& mu0, int T,
                                    PredictMode mode, const std::vector<Mat>& truths = {},
                                    bool allow_unfitted = false);

namespace detail {

// Shared outer-loop driver for this trainer and the forward baseline: owns
// init, batching, teacher forcing, Adam, logging, best tracking, and the
// checkpoint sink. step() returns the clipped gradient for one transition;
// rollout() advances the free-running state when teacher forcing is off.
struct StepOutcome {
  std::vector<Mat> blocks;
  double loss = 0.0;
  double raw_norm = 0.0;
  int inner_iterations = 0;
  bool inner_converged = false;
  std::optional<icnn::IcnnParams> theta_star;
};
using StepFn = std::function<StepOutcome(const energy::EnergyParams& xi, const Mat& nu,
                                         const Mat& mu_next)>;
using RolloutFn = std::function<Mat(const energy::EnergyParams& xi, const Mat& cloud)>;
using AdvanceFn = std::function<Mat(const Mat& cloud)>;

struct LoopResult {
  energy::EnergyParams xi;
  energy::EnergyParams best_xi;
  double best_loss = 0.0;
  long best_step = 0;
  std::vector<TrainStepLog> log;
};

LoopResult run_outer_loop(const std::vector<data::SnapshotDataset>& trajectories,
                          const TrainConfig& cfg, const std::string& kind, const StepFn& step,
                          const RolloutFn& rollout, const CheckpointSink& sink);

// Pure rollout used by both predict_trajectory implementations.
std::vector<Mat> roll_predictions(const Mat& mu0, int T, PredictMode mode,
                                  const std::vector<Mat>& truths, const AdvanceFn& advance);

}  // namespace detail

}  // namespace popdyn::train
