#include "popdyn/energy.hpp"

namespace popdyn::energy {

void MlpShape::validate() const {
  if (input_dim < 1) throw ConfigError("energy: input_dim must be >= 1");
  if (widths.empty()) throw ConfigError("energy: at least one layer required");
  for (Index w : widths)
    if (w < 1) throw ConfigError("energy: layer widths must be >= 1");
  if (widths.back() != 1) throw ConfigError("energy: final layer width must be 1");
}

EnergyParams init_energy(Index input_dim, std::uint64_t seed) {
  MlpShape shape;
  shape.input_dim = input_dim;
  shape.validate();
  Rng rng(seed);
  EnergyParams p;
  p.shape = shape;
  Index fan_in = input_dim;
  for (Index w : shape.widths) {
    p.w.push_back(rng.normal_mat(fan_in, w, 0.1));
    p.b.push_back(Mat::Zero(1, w));
    fan_in = w;
  }
  return p;
}

namespace {

template <typename F>
EnergyVars map_params(const EnergyParams& p, F lift) {
  p.shape.validate();
  EnergyVars v;
  v.shape = p.shape;
  for (const Mat& m : p.w) v.w.push_back(lift(m));
  for (const Mat& m : p.b) v.b.push_back(lift(m));
  return v;
}

}  // namespace

EnergyVars EnergyVars::from(const EnergyParams& p) {
  return map_params(p, [](const Mat& m) { return ad::variable(m); });
}

EnergyVars EnergyVars::constants(const EnergyParams& p) {
  return map_params(p, [](const Mat& m) { return ad::constant(m); });
}

std::vector<Var> EnergyVars::flat() const {
  std::vector<Var> out;
  out.insert(out.end(), w.begin(), w.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

EnergyVars EnergyVars::from_flat(const MlpShape& shape, const std::vector<Var>& blocks) {
  shape.validate();
  const std::size_t depth = shape.widths.size();
  if (blocks.size() != 2 * depth) throw ShapeError("energy: wrong number of parameter blocks");
  EnergyVars v;
  v.shape = shape;
  for (std::size_t l = 0; l < depth; ++l) v.w.push_back(blocks[l]);
  for (std::size_t l = 0; l < depth; ++l) v.b.push_back(blocks[depth + l]);
  return v;
}

EnergyParams EnergyVars::to_params() const {
  EnergyParams p;
  p.shape = shape;
  for (const Var& v : w) p.w.push_back(v.value());
  for (const Var& v : b) p.b.push_back(v.value());
  return p;
}

Var eval(const EnergyVars& v, const Var& x) {
  if (x.cols() != v.shape.input_dim)
    throw ShapeError("energy: input dimension does not match the network");
  const std::size_t depth = v.shape.widths.size();
  Var h = x;
  for (std::size_t l = 0; l < depth; ++l) {
    Var pre = ad::add(ad::matmul(h, v.w[l]), v.b[l]);
    h = (l + 1 < depth) ? ad::softplus(pre) : pre;
  }
  return h;
}

Var of_measure(const EnergyVars& v, const Var& cloud) {
  if (cloud.rows() < 1) throw DataError("energy: cloud must contain at least one point");
  return ad::mean(eval(v, cloud));
}

Var gradient_map(ad::Tape& tape, const EnergyVars& v, const Var& x, bool create_graph) {
  Var total = ad::sum(eval(v, x));
  // Partial derivative in x: weight blocks are stops (see the convex-map twin).
  return ad::backward(tape, total, Mat::Ones(1, 1), create_graph, {x}, v.flat()).at(x);
}

Vec values(const EnergyParams& p, const Mat& x) {
  ad::NoGradGuard freeze;
  return eval(EnergyVars::constants(p), ad::constant(x)).value().col(0);
}

double of_measure(const EnergyParams& p, const Mat& cloud) {
  if (cloud.rows() < 1) throw DataError("energy: cloud must contain at least one point");
  return values(p, cloud).mean();
}

Mat gradient_map(const EnergyParams& p, const Mat& x) {
  ad::Tape tape;
  ad::TapeScope scope(tape);
  Var xv = ad::variable(x);
  return gradient_map(tape, EnergyVars::constants(p), xv, false).value();
}

}  // namespace popdyn::energy
