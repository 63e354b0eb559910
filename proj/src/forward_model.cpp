#include "popdyn/forward_model.hpp"

#include <utility>

#include "popdyn/autodiff.hpp"
#include "popdyn/ot.hpp"

namespace popdyn::fwd {

Mat forward_step(const energy::EnergyParams& xi, const Mat& cloud) {
  if (cloud.cols() != xi.shape.input_dim)
    throw ShapeError("forward_step: cloud dimension " + std::to_string(cloud.cols()) +
                     " != potential input dimension " + std::to_string(xi.shape.input_dim));
  return energy::gradient_map(xi, cloud);
}

train::OuterGradient forward_gradient(const energy::EnergyParams& xi, const Mat& nu,
                                      const Mat& mu_next, const train::TrainConfig& cfg) {
  cfg.validate();
  if (nu.cols() != mu_next.cols())
    throw ShapeError("forward_gradient: input dimension " + std::to_string(nu.cols()) +
                     " != target dimension " + std::to_string(mu_next.cols()));

  ad::Tape tape;
  ad::TapeScope scope(tape);
  energy::EnergyVars vars = energy::EnergyVars::from(xi);
  ad::Var x = ad::variable(nu);
  // Differentiable in the weights so the divergence gradient can chain on.
  ad::Var pushed = energy::gradient_map(tape, vars, x, /*create_graph=*/true);

  ot::DiscreteMeasure pred = ot::DiscreteMeasure::uniform(pushed.value());
  ot::DiscreteMeasure target = ot::DiscreteMeasure::uniform(mu_next);
  ot::DivergenceWithGrad dw =
      ot::sinkhorn_divergence_with_grad(pred, target, cfg.eps, cfg.sinkhorn);

  std::vector<ad::Var> leaves = vars.flat();
  ad::GradMap g = ad::backward(tape, pushed, dw.grad, false, leaves);

  train::OuterGradient out;
  out.blocks.reserve(leaves.size());
  for (const ad::Var& v : leaves) out.blocks.push_back(g.at(v).value());
  out.loss = dw.value;
  out.raw_norm = train::clip_global_norm(out.blocks, cfg.clip_norm);
  out.inner_iterations = 0;
  out.inner_converged = true;
  return out;
}

ForwardTrainResult train_forward(const std::vector<data::SnapshotDataset>& trajectories,
                                 const train::TrainConfig& cfg_in,
                                 const train::CheckpointSink& sink) {
  train::TrainConfig cfg = cfg_in;
  cfg.validate();

  train::detail::StepFn step = [cfg](const energy::EnergyParams& xi, const Mat& nu,
                                     const Mat& mu_next) {
    train::OuterGradient og = forward_gradient(xi, nu, mu_next, cfg);
    train::detail::StepOutcome oc;
    oc.blocks = std::move(og.blocks);
    oc.loss = og.loss;
    oc.raw_norm = og.raw_norm;
    oc.inner_iterations = 0;
    oc.inner_converged = true;
    return oc;
  };
  train::detail::RolloutFn rollout = [](const energy::EnergyParams& xi, const Mat& cloud) {
    return forward_step(xi, cloud);
  };

  train::detail::LoopResult lr =
      train::detail::run_outer_loop(trajectories, cfg, "forward", step, rollout, sink);
  ForwardTrainResult res;
  res.model.xi = std::move(lr.xi);
  res.model.config = cfg;
  res.model.fitted = true;
  res.best_xi = std::move(lr.best_xi);
  res.best_loss = lr.best_loss;
  res.best_step = lr.best_step;
  res.log = std::move(lr.log);
  return res;
}

std::vector<Mat> predict_trajectory(const ForwardModel& model, const Mat& mu0, int T,
                                    train::PredictMode mode, const std::vector<Mat>& truths,
                                    bool allow_unfitted) {
  if (!model.fitted && !allow_unfitted)
    throw ConfigError("model is not fitted; pass allow_unfitted for zero-shot use");
  return train::detail::roll_predictions(
      mu0, T, mode, truths, [&](const Mat& cloud) { return forward_step(model.xi, cloud); });
}

}  // namespace popdyn::fwd
