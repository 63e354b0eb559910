#include "popdyn/icnn.hpp"

#include <utility>

namespace popdyn::icnn {

void IcnnShape::validate() const {
  if (input_dim < 1) throw ConfigError("icnn: input_dim must be >= 1");
  if (widths.empty()) throw ConfigError("icnn: at least one layer required");
  for (Index w : widths)
    if (w < 1) throw ConfigError("icnn: layer widths must be >= 1");
  if (widths.back() != 1) throw ConfigError("icnn: final layer width must be 1");
  if (!(beta > 0.0)) throw ConfigError("icnn: activation slope must be positive");
}

IcnnShape IcnnShape::make(Index input_dim, Index hidden_width, Index depth, double beta) {
  if (depth < 1) throw ConfigError("icnn: depth must be >= 1");
  IcnnShape s;
  s.input_dim = input_dim;
  s.widths.assign(static_cast<std::size_t>(depth - 1), hidden_width);
  s.widths.push_back(1);
  s.beta = beta;
  s.validate();
  return s;
}

IcnnParams init_icnn(const IcnnShape& shape, std::uint64_t seed) {
  shape.validate();
  Rng rng(seed);
  IcnnParams p;
  p.shape = shape;
  const std::size_t depth = shape.widths.size();
  for (std::size_t l = 0; l < depth; ++l)
    p.wx.push_back(rng.normal_mat(shape.input_dim, shape.widths[l], 0.1));
  for (std::size_t l = 1; l < depth; ++l)
    p.wz.push_back(rng.normal_mat(shape.widths[l - 1], shape.widths[l], 0.1).cwiseMax(0.0));
  for (std::size_t l = 0; l < depth; ++l)
    p.b.push_back(Mat::Zero(1, shape.widths[l]));
  return p;
}

namespace {

template <typename F>
IcnnVars map_params(const IcnnParams& p, F lift) {
  p.shape.validate();
  IcnnVars v;
  v.shape = p.shape;
  for (const Mat& m : p.wx) v.wx.push_back(lift(m));
  for (const Mat& m : p.wz) v.wz.push_back(lift(m));
  for (const Mat& m : p.b) v.b.push_back(lift(m));
  return v;
}

}  // namespace

IcnnVars IcnnVars::from(const IcnnParams& p) {
  return map_params(p, [](const Mat& m) { return ad::variable(m); });
}

IcnnVars IcnnVars::constants(const IcnnParams& p) {
  return map_params(p, [](const Mat& m) { return ad::constant(m); });
}

std::vector<Var> IcnnVars::flat() const {
  std::vector<Var> out;
  out.insert(out.end(), wx.begin(), wx.end());
  out.insert(out.end(), wz.begin(), wz.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

IcnnVars IcnnVars::from_flat(const IcnnShape& shape, const std::vector<Var>& blocks) {
  shape.validate();
  const std::size_t depth = shape.widths.size();
  if (blocks.size() != 3 * depth - 1)
    throw ShapeError("icnn: wrong number of parameter blocks");
  IcnnVars v;
  v.shape = shape;
  std::size_t k = 0;
  for (std::size_t l = 0; l < depth; ++l) v.wx.push_back(blocks[k++]);
  for (std::size_t l = 1; l < depth; ++l) v.wz.push_back(blocks[k++]);
  for (std::size_t l = 0; l < depth; ++l) v.b.push_back(blocks[k++]);
  return v;
}

IcnnParams IcnnVars::to_params() const {
  IcnnParams p;
  p.shape = shape;
  for (const Var& v : wx) p.wx.push_back(v.value());
  for (const Var& v : wz) p.wz.push_back(v.value());
  for (const Var& v : b) p.b.push_back(v.value());
  return p;
}

Var forward(const IcnnVars& v, const Var& x) {
  if (x.cols() != v.shape.input_dim)
    throw ShapeError("icnn: input dimension does not match the network");
  const double beta = v.shape.beta;
  const std::size_t depth = v.shape.widths.size();
  Var z = ad::sq_leaky_relu(ad::add(ad::matmul(x, v.wx[0]), v.b[0]), beta);
  for (std::size_t l = 1; l < depth; ++l) {
    Var pre = ad::add(ad::add(ad::matmul(x, v.wx[l]), ad::matmul(z, v.wz[l - 1])), v.b[l]);
    z = ad::leaky_relu(pre, beta);
  }
  return z;
}

Var gradient_map(ad::Tape& tape, const IcnnVars& v, const Var& x, double ell,
                 bool create_graph) {
  Var total = ad::sum(forward(v, x));
  // The map is the partial derivative in x with the weights held fixed, so the
  // weight blocks are stop nodes: when they are themselves graph outputs (an
  // unrolled optimizer step), the sweep must not descend into their history.
  ad::GradMap g = ad::backward(tape, total, Mat::Ones(1, 1), create_graph, {x}, v.flat());
  Var dx = g.at(x);
  if (ell == 0.0) return dx;
  return ad::add(dx, ad::scalar_mul(x, ell));
}

Vec values(const IcnnParams& p, const Mat& x) {
  ad::NoGradGuard freeze;
  return forward(IcnnVars::constants(p), ad::constant(x)).value().col(0);
}

Mat gradient_map(const IcnnParams& p, const Mat& x, double ell) {
  ad::Tape tape;
  ad::TapeScope scope(tape);
  Var xv = ad::variable(x);
  return gradient_map(tape, IcnnVars::constants(p), xv, ell, false).value();
}

Mat pushforward(const IcnnParams& p, const Mat& cloud, double ell) {
  return gradient_map(p, cloud, ell);
}

void project_nonnegative(IcnnParams& p) {
  for (Mat& m : p.wz) m = m.cwiseMax(0.0);
}

IcnnVars project_nonnegative(const IcnnVars& v) {
  IcnnVars out = v;
  for (Var& w : out.wz) w = ad::relu(w);
  return out;
}

double convexity_penalty(const IcnnParams& p, double lambda) {
  if (lambda < 0.0) throw ConfigError("icnn: penalty weight must be >= 0");
  double acc = 0.0;
  for (const Mat& m : p.wz) acc += (-m).cwiseMax(0.0).squaredNorm();
  return lambda * acc;
}

}  // namespace popdyn::icnn
