#include "popdyn/trainer.hpp"

#include <cmath>
#include <limits>
#include <utility>

#include "json.hpp"

namespace popdyn::train {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr_xi > 0.0)) throw ConfigError("train: lr_xi must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw ConfigError("train: Adam betas must lie in [0, 1)");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (!(clip_norm > 0.0)) throw ConfigError("train: clip_norm must be positive");
  if (!(eps > 0.0)) throw ConfigError("train: eps must be positive");
  if (hidden_width < 1) throw ConfigError("train: hidden_width must be >= 1");
  if (icnn_depth < 2) throw ConfigError("train: icnn_depth must be >= 2");
  if (checkpoint_every < 0) throw ConfigError("train: checkpoint_every must be >= 0");
  if (!(sinkhorn.marginal_tol > 0.0) || sinkhorn.max_iter < 1)
    throw ConfigError("train: invalid sinkhorn settings");
  jko.validate();
}

std::string to_json(const TrainConfig& cfg) {
  json j;
  j["lr_xi"] = cfg.lr_xi;
  j["beta1"] = cfg.beta1;
  j["beta2"] = cfg.beta2;
  j["batch_size"] = cfg.batch_size;
  j["epochs"] = cfg.epochs;
  j["teacher_forcing"] = cfg.teacher_forcing;
  j["warm_start"] = cfg.warm_start;
  j["clip_norm"] = cfg.clip_norm;
  j["eps"] = cfg.eps;
  j["seed"] = cfg.seed;
  j["hidden_width"] = cfg.hidden_width;
  j["icnn_depth"] = cfg.icnn_depth;
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["sinkhorn"] = {{"marginal_tol", cfg.sinkhorn.marginal_tol},
                   {"max_iter", cfg.sinkhorn.max_iter}};
  j["jko"] = {{"tau", cfg.jko.tau},           {"ell", cfg.jko.ell},
              {"lr_theta", cfg.jko.lr_theta}, {"beta1", cfg.jko.beta1},
              {"beta2", cfg.jko.beta2},       {"min_iters", cfg.jko.min_iters},
              {"max_iters", cfg.jko.max_iters}, {"alpha", cfg.jko.alpha},
              {"unroll", cfg.jko.unroll},     {"fixed_iters", cfg.jko.fixed_iters}};
  return j.dump(2);
}

namespace {

template <typename T>
void take_key(json& obj, const char* key, T& field) {
  if (!obj.contains(key)) return;
  try {
    field = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
  obj.erase(key);
}

json take_object(json& obj, const char* key) {
  if (!obj.contains(key)) return json::object();
  json sub = obj.at(key);
  if (!sub.is_object()) throw ConfigError(std::string("config key '") + key + "' must be an object");
  obj.erase(key);
  return sub;
}

void reject_leftovers(const json& obj, const std::string& prefix) {
  if (!obj.empty())
    throw ConfigError("unknown config key '" + prefix + obj.begin().key() + "'");
}

}  // namespace

TrainConfig train_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  TrainConfig cfg;
  take_key(j, "lr_xi", cfg.lr_xi);
  take_key(j, "beta1", cfg.beta1);
  take_key(j, "beta2", cfg.beta2);
  take_key(j, "batch_size", cfg.batch_size);
  take_key(j, "epochs", cfg.epochs);
  take_key(j, "teacher_forcing", cfg.teacher_forcing);
  take_key(j, "warm_start", cfg.warm_start);
  take_key(j, "clip_norm", cfg.clip_norm);
  take_key(j, "eps", cfg.eps);
  take_key(j, "seed", cfg.seed);
  take_key(j, "hidden_width", cfg.hidden_width);
  take_key(j, "icnn_depth", cfg.icnn_depth);
  take_key(j, "checkpoint_every", cfg.checkpoint_every);
  json s = take_object(j, "sinkhorn");
  take_key(s, "marginal_tol", cfg.sinkhorn.marginal_tol);
  take_key(s, "max_iter", cfg.sinkhorn.max_iter);
  reject_leftovers(s, "sinkhorn.");
  json k = take_object(j, "jko");
  take_key(k, "tau", cfg.jko.tau);
  take_key(k, "ell", cfg.jko.ell);
  take_key(k, "lr_theta", cfg.jko.lr_theta);
  take_key(k, "beta1", cfg.jko.beta1);
  take_key(k, "beta2", cfg.jko.beta2);
  take_key(k, "min_iters", cfg.jko.min_iters);
  take_key(k, "max_iters", cfg.jko.max_iters);
  take_key(k, "alpha", cfg.jko.alpha);
  take_key(k, "unroll", cfg.jko.unroll);
  take_key(k, "fixed_iters", cfg.jko.fixed_iters);
  reject_leftovers(k, "jko.");
  reject_leftovers(j, "");
  return cfg;
}

double clip_global_norm(std::vector<Mat>& blocks, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_global_norm: bound must be positive");
  double sq = 0.0;
  for (const Mat& b : blocks) sq += b.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (Mat& b : blocks) b *= scale;
  }
  return norm;
}

namespace {

// One proximal push with frozen energy parameters (no gradient recording).
Mat plain_push(const energy::EnergyParams& xi, const icnn::IcnnParams& theta0, const Mat& cloud,
               const TrainConfig& cfg) {
  jko::JkoConfig j = cfg.jko;
  j.unroll = false;
  jko::EnergyFn efn = [&xi](const ad::Var& c) {
    energy::EnergyVars cv = energy::EnergyVars::constants(xi);
    return energy::of_measure(cv, c);
  };
  return jko::jko_step(efn, cloud, theta0, j).rho_next;
}

}  // namespace

OuterGradient outer_gradient(const energy::EnergyParams& xi, const icnn::IcnnParams& theta0,
                             const Mat& nu, const Mat& mu_next, const TrainConfig& cfg) {
  cfg.validate();
  if (!cfg.jko.unroll)
    throw ConfigError("outer_gradient: the inner solver must run with unroll enabled");
  if (nu.cols() != mu_next.cols())
    throw ShapeError("outer_gradient: input dimension " + std::to_string(nu.cols()) +
                     " != target dimension " + std::to_string(mu_next.cols()));

  ad::Tape tape;
  ad::TapeScope scope(tape);
  energy::EnergyVars vars = energy::EnergyVars::from(xi);
  jko::EnergyFn efn = [&vars](const ad::Var& cloud) { return energy::of_measure(vars, cloud); };
  jko::JkoStepResult step = jko::jko_step(efn, nu, theta0, cfg.jko);

  ot::DiscreteMeasure pred = ot::DiscreteMeasure::uniform(step.rho_next);
  ot::DiscreteMeasure target = ot::DiscreteMeasure::uniform(mu_next);
  ot::DivergenceWithGrad dw =
      ot::sinkhorn_divergence_with_grad(pred, target, cfg.eps, cfg.sinkhorn);

  std::vector<ad::Var> leaves = vars.flat();
  ad::GradMap g = ad::backward(tape, step.rho_next_var, dw.grad, false, leaves);

  OuterGradient out;
  out.blocks.reserve(leaves.size());
  for (const ad::Var& v : leaves) out.blocks.push_back(g.at(v).value());
  out.loss = dw.value;
  out.raw_norm = clip_global_norm(out.blocks, cfg.clip_norm);
  out.inner_iterations = step.iterations;
  out.inner_converged = step.converged;
  out.theta_star = std::move(step.theta_star);
  return out;
}

namespace detail {

LoopResult run_outer_loop(const std::vector<data::SnapshotDataset>& trajectories,
                          const TrainConfig& cfg, const std::string& kind, const StepFn& step,
                          const RolloutFn& rollout, const CheckpointSink& sink) {
  cfg.validate();
  if (trajectories.empty()) throw DataError("training requires at least one trajectory");
  for (const data::SnapshotDataset& ds : trajectories) {
    ds.validate();
    if (ds.snapshots.size() < 2)
      throw DataError("trajectory '" + ds.name + "' has no transitions");
    if (ds.dim != trajectories[0].dim)
      throw ShapeError("trajectory '" + ds.name + "' has dimension " + std::to_string(ds.dim) +
                       ", expected " + std::to_string(trajectories[0].dim));
  }

  LoopResult res;
  res.xi = energy::init_energy(trajectories[0].dim, Rng::derive(cfg.seed, 0));
  res.best_xi = res.xi;
  res.best_loss = std::numeric_limits<double>::infinity();
  res.best_step = 0;

  optim::AdamState astate;
  Rng batch_rng(Rng::derive(cfg.seed, 2));
  auto subsample = [&](const Mat& cloud) -> Mat {
    if (cloud.rows() <= cfg.batch_size) return cloud;
    std::vector<Index> rows = batch_rng.sample_without_replacement(cloud.rows(), cfg.batch_size);
    Mat out(cfg.batch_size, cloud.cols());
    for (Index i = 0; i < cfg.batch_size; ++i)
      out.row(i) = cloud.row(rows[static_cast<std::size_t>(i)]);
    return out;
  };

  std::optional<icnn::IcnnParams> last_theta;
  long global_step = 0;
  auto send_checkpoint = [&](long at_step) {
    if (!sink) return;
    ckpt::Checkpoint c;
    c.kind = kind;
    c.seed = cfg.seed;
    c.step = at_step;
    c.config_json = to_json(cfg);
    c.xi = res.xi;
    c.theta = last_theta;
    sink(c);
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t traj = 0; traj < trajectories.size(); ++traj) {
      const std::vector<Mat>& snaps = trajectories[traj].snapshots;
      Mat rho = snaps[0];  // free-running state for the non-teacher-forced branch
      for (std::size_t t = 0; t + 1 < snaps.size(); ++t) {
        const Mat& nu_full = cfg.teacher_forcing ? snaps[t] : rho;
        const Mat nu = subsample(nu_full);
        const Mat target = subsample(snaps[t + 1]);

        StepOutcome oc = step(res.xi, nu, target);
        ++global_step;
        if (!std::isfinite(oc.loss))
          throw NumericError("training aborted at outer step " + std::to_string(global_step) +
                             ": non-finite loss (checkpoints written so far are retained)");
        if (oc.theta_star) last_theta = oc.theta_star;
        if (oc.loss < res.best_loss) {
          // The loss was measured under the pre-update parameters.
          res.best_loss = oc.loss;
          res.best_xi = res.xi;
          res.best_step = global_step;
        }

        std::vector<Mat> params;
        params.reserve(res.xi.w.size() + res.xi.b.size());
        for (const Mat& m : res.xi.w) params.push_back(m);
        for (const Mat& m : res.xi.b) params.push_back(m);
        if (oc.blocks.size() != params.size())
          throw ShapeError("outer gradient returned " + std::to_string(oc.blocks.size()) +
                           " blocks for " + std::to_string(params.size()) + " parameters");
        optim::adam_step(astate, params, oc.blocks, cfg.adam());
        std::size_t k = 0;
        for (Mat& m : res.xi.w) m = params[k++];
        for (Mat& m : res.xi.b) m = params[k++];

        res.log.push_back({epoch, static_cast<int>(traj), static_cast<int>(t), oc.loss,
                           oc.raw_norm, oc.inner_iterations, oc.inner_converged});
        if (cfg.checkpoint_every > 0 && global_step % cfg.checkpoint_every == 0)
          send_checkpoint(global_step);
        if (!cfg.teacher_forcing && t + 2 < snaps.size()) rho = rollout(res.xi, rho);
      }
    }
  }
  send_checkpoint(global_step);
  return res;
}

std::vector<Mat> roll_predictions(const Mat& mu0, int T, PredictMode mode,
                                  const std::vector<Mat>& truths, const AdvanceFn& advance) {
  if (T < 0) throw ConfigError("prediction horizon must be >= 0");
  if (mode == PredictMode::one_step && static_cast<int>(truths.size()) < T)
    throw DataError("one-step prediction over " + std::to_string(T) + " transitions needs " +
                    std::to_string(T) + " conditioning snapshots, got " +
                    std::to_string(truths.size()));
  std::vector<Mat> out{mu0};
  out.reserve(static_cast<std::size_t>(T) + 1);
  for (int t = 0; t < T; ++t)
    out.push_back(advance(mode == PredictMode::one_step ? truths[static_cast<std::size_t>(t)]
                                                        : out.back()));
  return out;
}

}  // namespace detail

TrainResult train_jkonet(const std::vector<data::SnapshotDataset>& trajectories,
                         const TrainConfig& cfg_in, const CheckpointSink& sink) {
  TrainConfig cfg = cfg_in;
  cfg.jko.unroll = true;  // the outer gradient needs the recorded inner trajectory
  cfg.validate();
  if (trajectories.empty()) throw DataError("training requires at least one trajectory");

  const Index dim = trajectories[0].dim;
  const icnn::IcnnParams theta_init =
      icnn::init_icnn(cfg.inner_shape(dim), Rng::derive(cfg.seed, 1));
  auto warm = std::make_shared<std::optional<icnn::IcnnParams>>();

  detail::StepFn step = [cfg, theta_init, warm](const energy::EnergyParams& xi, const Mat& nu,
                                                const Mat& mu_next) {
    const icnn::IcnnParams& theta0 = (cfg.warm_start && warm->has_value()) ? **warm : theta_init;
    OuterGradient og = outer_gradient(xi, theta0, nu, mu_next, cfg);
    if (cfg.warm_start) *warm = og.theta_star;
    detail::StepOutcome oc;
    oc.blocks = std::move(og.blocks);
    oc.loss = og.loss;
    oc.raw_norm = og.raw_norm;
    oc.inner_iterations = og.inner_iterations;
    oc.inner_converged = og.inner_converged;
    oc.theta_star = std::move(og.theta_star);
    return oc;
  };
  detail::RolloutFn rollout = [cfg, theta_init](const energy::EnergyParams& xi, const Mat& cloud) {
    return plain_push(xi, theta_init, cloud, cfg);
  };

  detail::LoopResult lr = detail::run_outer_loop(trajectories, cfg, "jkonet", step, rollout, sink);
  TrainResult res;
  res.model.xi = std::move(lr.xi);
  res.model.config = cfg;
  res.model.fitted = true;
  res.best_xi = std::move(lr.best_xi);
  res.best_loss = lr.best_loss;
  res.best_step = lr.best_step;
  res.log = std::move(lr.log);
  return res;
}

PredictMode parse_predict_mode(const std::string& name) {
  if (name == "one-step") return PredictMode::one_step;
  if (name == "all-steps") return PredictMode::all_steps;
  throw ConfigError("unknown prediction mode '" + name + "' (use one-step or all-steps)");
}

std::vector<Mat> predict_trajectory(const JkonetModel& model, const Mat& mu0, int T,
                                    PredictMode mode, const std::vector<Mat>& truths,
                                    bool allow_unfitted) {
  if (!model.fitted && !allow_unfitted)
    throw ConfigError("model is not fitted; pass allow_unfitted for zero-shot use");
  model.config.validate();
  const icnn::IcnnParams theta0 =
      icnn::init_icnn(model.config.inner_shape(mu0.cols()), Rng::derive(model.config.seed, 1));
  return detail::roll_predictions(mu0, T, mode, truths, [&](const Mat& cloud) {
    return plain_push(model.xi, theta0, cloud, model.config);
  });
}

}  // namespace popdyn::train
