#include "popdyn/adam.hpp"

#include <cmath>

namespace popdyn::optim {

void AdamConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("adam: lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("adam: beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam: beta2 must lie in [0, 1)");
  if (!(eps > 0.0) || !(eps_root > 0.0)) throw ConfigError("adam: eps terms must be positive");
}

std::vector<Var> adam_step(AdamVarState& state, const std::vector<Var>& params,
                           const std::vector<Var>& grads, const AdamConfig& cfg) {
  cfg.validate();
  if (params.size() != grads.size()) throw ShapeError("adam: params/grads block count mismatch");
  if (state.m.empty()) {
    for (const Var& p : params) {
      state.m.push_back(ad::constant(Mat::Zero(p.rows(), p.cols())));
      state.v.push_back(ad::constant(Mat::Zero(p.rows(), p.cols())));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam: state/block count mismatch");

  state.step += 1;
  const double bc1 = 1.0 / (1.0 - std::pow(cfg.beta1, state.step));
  const double bc2 = 1.0 / (1.0 - std::pow(cfg.beta2, state.step));

  std::vector<Var> out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Var& g = grads[i];
    Var m = ad::add(ad::scalar_mul(state.m[i], cfg.beta1), ad::scalar_mul(g, 1.0 - cfg.beta1));
    Var v = ad::add(ad::scalar_mul(state.v[i], cfg.beta2),
                    ad::scalar_mul(ad::square(g), 1.0 - cfg.beta2));
    Var mhat = ad::scalar_mul(m, bc1);
    Var vhat = ad::scalar_mul(v, bc2);
    Var denom = ad::add(ad::sqrt(ad::add(vhat, ad::constant(cfg.eps_root))),
                        ad::constant(cfg.eps));
    Var update = ad::div(mhat, denom);
    out.push_back(ad::sub(params[i], ad::scalar_mul(update, cfg.lr)));
    state.m[i] = m;
    state.v[i] = v;
  }
  return out;
}

void adam_step(AdamState& state, std::vector<Mat>& params, const std::vector<Mat>& grads,
               const AdamConfig& cfg) {
  // route through the taped formula with untracked values so both forms share
  // one arithmetic path; nothing records
  AdamVarState vs;
  vs.step = state.step;
  for (std::size_t i = 0; i < state.m.size(); ++i) {
    vs.m.push_back(ad::constant(state.m[i]));
    vs.v.push_back(ad::constant(state.v[i]));
  }
  std::vector<Var> p, g;
  p.reserve(params.size());
  g.reserve(grads.size());
  for (const Mat& m : params) p.push_back(ad::constant(m));
  for (const Mat& m : grads) g.push_back(ad::constant(m));
  ad::NoGradGuard freeze;
  std::vector<Var> out = adam_step(vs, p, g, cfg);
  state.step = vs.step;
  state.m.clear();
  state.v.clear();
  for (std::size_t i = 0; i < out.size(); ++i) {
    state.m.push_back(vs.m[i].value());
    state.v.push_back(vs.v[i].value());
    params[i] = out[i].value();
  }
}

}  // namespace popdyn::optim
