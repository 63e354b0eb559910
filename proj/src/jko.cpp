#include "popdyn/jko.hpp"

#include <cmath>
#include <string>

namespace popdyn::jko {

void JkoConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("jko: tau must be positive");
  if (ell < 0.0) throw ConfigError("jko: ell must be >= 0");
  if (min_iters < 1) throw ConfigError("jko: min_iters must be >= 1");
  if (min_iters > max_iters) throw ConfigError("jko: min_iters must be <= max_iters");
  if (!(alpha > 0.0)) throw ConfigError("jko: alpha must be positive");
  if (fixed_iters < 0) throw ConfigError("jko: fixed_iters must be >= 0");
  adam().validate();
}

Var jko_objective(ad::Tape& tape, const icnn::IcnnVars& theta, const EnergyFn& energy,
                  const Var& nu, double tau, double ell) {
  if (!(tau > 0.0)) throw ConfigError("jko: tau must be positive");
  Var pushed = icnn::gradient_map(tape, theta, nu, ell, /*create_graph=*/true);
  Var prox = ad::scalar_mul(ad::mean(ad::rows_sqnorm(ad::sub(nu, pushed))), 1.0 / (2.0 * tau));
  return ad::add(energy(pushed), prox);
}

double convergence_metric(const std::vector<Mat>& block_grads) {
  double norm_sum = 0.0;
  double count = 0.0;
  for (const Mat& g : block_grads) {
    norm_sum += g.norm();
    count += static_cast<double>(g.size());
  }
  return count > 0.0 ? norm_sum / count : 0.0;
}

namespace {

JkoStepResult jko_step_plain(const EnergyFn& energy, const Mat& nu,
                             const icnn::IcnnParams& theta0, const JkoConfig& cfg) {
  JkoStepResult res;
  icnn::IcnnParams theta = theta0;
  std::vector<Mat> blocks;  // canonical flat order: wx..., wz..., b...
  auto collect = [&] {
    blocks.clear();
    for (const Mat& m : theta.wx) blocks.push_back(m);
    for (const Mat& m : theta.wz) blocks.push_back(m);
    for (const Mat& m : theta.b) blocks.push_back(m);
  };
  auto scatter = [&] {
    std::size_t k = 0;
    for (Mat& m : theta.wx) m = blocks[k++];
    for (Mat& m : theta.wz) m = blocks[k++];
    for (Mat& m : theta.b) m = blocks[k++];
  };

  optim::AdamState st;
  st.m.resize(0);
  const int limit = cfg.fixed_iters > 0 ? cfg.fixed_iters : cfg.max_iters;
  for (int k = 1; k <= limit; ++k) {
    ad::Tape tape;
    ad::TapeScope scope(tape);
    icnn::IcnnVars vars = icnn::IcnnVars::from(theta);
    Var xv = ad::variable(nu);
    Var obj;
    try {
      obj = jko_objective(tape, vars, energy, xv, cfg.tau, cfg.ell);
    } catch (const NumericError& e) {
      throw NumericError("jko_step: non-finite objective at inner iteration " +
                         std::to_string(k) + ": " + e.what());
    }
    res.objective_trace.push_back(obj.value()(0, 0));
    if (!std::isfinite(res.objective_trace.back()))
      throw NumericError("jko_step: non-finite objective at inner iteration " +
                         std::to_string(k));
    std::vector<Var> flat = vars.flat();
    ad::GradMap gm = ad::backward(tape, obj, Mat::Ones(1, 1), false, flat);
    std::vector<Mat> grads;
    grads.reserve(flat.size());
    for (const Var& p : flat) grads.push_back(gm.at(p).value());
    res.final_metric = convergence_metric(grads);

    collect();
    optim::adam_step(st, blocks, grads, cfg.adam());
    scatter();
    icnn::project_nonnegative(theta);
    res.iterations = k;
    if (cfg.fixed_iters > 0) continue;
    if (res.final_metric < cfg.alpha && k >= cfg.min_iters) {
      res.converged = true;
      break;
    }
  }
  if (cfg.fixed_iters > 0) res.converged = true;

  res.theta_star = theta;
  res.rho_next = icnn::pushforward(theta, nu, cfg.ell);
  return res;
}

JkoStepResult jko_step_unrolled(const EnergyFn& energy, const Mat& nu,
                                const icnn::IcnnParams& theta0, const JkoConfig& cfg) {
  if (!ad::Tape::recording())
    throw ConfigError("jko: unrolled step requires an active recording tape");
  ad::Tape& tape = *ad::Tape::active();

  JkoStepResult res;
  icnn::IcnnVars vars = icnn::IcnnVars::from(theta0);
  Var xv = ad::variable(nu);
  optim::AdamVarState st;
  const int limit = cfg.fixed_iters > 0 ? cfg.fixed_iters : cfg.max_iters;
  for (int k = 1; k <= limit; ++k) {
    Var obj;
    try {
      obj = jko_objective(tape, vars, energy, xv, cfg.tau, cfg.ell);
    } catch (const NumericError& e) {
      throw NumericError("jko_step: non-finite objective at inner iteration " +
                         std::to_string(k) + ": " + e.what());
    }
    res.objective_trace.push_back(obj.value()(0, 0));
    if (!std::isfinite(res.objective_trace.back()))
      throw NumericError("jko_step: non-finite objective at inner iteration " +
                         std::to_string(k));
    std::vector<Var> flat = vars.flat();
    ad::GradMap gm = ad::backward(tape, obj, Mat::Ones(1, 1), /*create_graph=*/true, flat);
    std::vector<Var> grads;
    grads.reserve(flat.size());
    std::vector<Mat> grad_values;
    grad_values.reserve(flat.size());
    for (const Var& p : flat) {
      grads.push_back(gm.at(p));
      grad_values.push_back(grads.back().value());
    }
    res.final_metric = convergence_metric(grad_values);

    std::vector<Var> updated = optim::adam_step(st, flat, grads, cfg.adam());
    vars = icnn::project_nonnegative(icnn::IcnnVars::from_flat(theta0.shape, updated));
    res.iterations = k;
    if (cfg.fixed_iters > 0) continue;
    if (res.final_metric < cfg.alpha && k >= cfg.min_iters) {
      res.converged = true;
      break;
    }
  }
  if (cfg.fixed_iters > 0) res.converged = true;

  res.theta_star = vars.to_params();
  res.rho_next_var = icnn::gradient_map(tape, vars, xv, cfg.ell, /*create_graph=*/true);
  res.rho_next = res.rho_next_var.value();
  return res;
}

}  // namespace

JkoStepResult jko_step(const EnergyFn& energy, const Mat& nu, const icnn::IcnnParams& theta0,
                       const JkoConfig& cfg) {
  cfg.validate();
  if (nu.rows() < 1) throw DataError("jko: input cloud must contain at least one point");
  if (nu.cols() != theta0.shape.input_dim)
    throw ShapeError("jko: cloud dimension does not match the potential network");
  return cfg.unroll ? jko_step_unrolled(energy, nu, theta0, cfg)
                    : jko_step_plain(energy, nu, theta0, cfg);
}

}  // namespace popdyn::jko
