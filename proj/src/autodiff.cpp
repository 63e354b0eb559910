#include "popdyn/autodiff.hpp"

#include <cmath>
#include <optional>
#include <sstream>
#include <unordered_set>

namespace popdyn::ad {

namespace {

thread_local Tape* t_active = nullptr;
thread_local int t_nograd = 0;

[[noreturn]] void shape_fail(const char* op, const Mat& a, const Mat& b) {
  std::ostringstream os;
  os << "op '" << op << "': incompatible shapes (" << a.rows() << "x" << a.cols()
     << ") and (" << b.rows() << "x" << b.cols() << ")";
  throw ShapeError(os.str());
}

// Broadcast of the second operand onto the first operand's shape.
enum class Bc { same, scalar, row, col };

bool classify(const Mat& a, const Mat& b, Bc& bc) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) { bc = Bc::same; return true; }
  if (b.rows() == 1 && b.cols() == 1) { bc = Bc::scalar; return true; }
  if (b.rows() == 1 && b.cols() == a.cols() && a.rows() > 1) { bc = Bc::row; return true; }
  if (b.cols() == 1 && b.rows() == a.rows() && a.cols() > 1) { bc = Bc::col; return true; }
  return false;
}

Mat expand(const Mat& b, Index r, Index c, Bc bc) {
  switch (bc) {
    case Bc::same: return b;
    case Bc::scalar: return Mat::Constant(r, c, b(0, 0));
    case Bc::row: return b.replicate(r, 1);
    case Bc::col: return b.replicate(1, c);
  }
  return b;  // unreachable
}

// Collapses a full-shape gradient back to the broadcast operand's shape.
Var reduce_to(const Var& g, Bc bc) {
  switch (bc) {
    case Bc::same: return g;
    case Bc::scalar: return sum(g);
    case Bc::row: return colsum(g);
    case Bc::col: return rowsum(g);
  }
  return g;  // unreachable
}

using Vjp = std::function<std::vector<Var>(const Var&, const Var&, const bool*)>;

}  // namespace

static Var make_op(const char* name, Mat&& value, std::vector<Var>&& inputs, Vjp&& vjp) {
  if (!value.allFinite())
    throw NumericError(std::string("non-finite result in op '") + name + "'");
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = name;
  bool rg = false;
  for (const Var& in : inputs) rg = rg || in.requires_grad();
  if (rg && Tape::recording()) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->vjp = std::move(vjp);
    Tape::active()->append(n);
  }
  return Var(std::move(n));
}

// ---------------------------------------------------------------------------
// Tape / scopes

Tape::~Tape() {
  // Release input references newest-first so no shared_ptr chain unwinds
  // recursively; the tape itself still holds every node at that point.
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    (*it)->inputs.clear();
    (*it)->vjp = nullptr;
  }
}

void Tape::append(std::shared_ptr<Node> n) {
  n->id = static_cast<long>(nodes_.size());
  n->owner = this;
  nodes_.push_back(std::move(n));
}

Tape* Tape::active() { return t_nograd > 0 ? nullptr : t_active; }
bool Tape::recording() { return t_active != nullptr && t_nograd == 0; }

TapeScope::TapeScope(Tape& t) : prev_(t_active) { t_active = &t; }
TapeScope::~TapeScope() { t_active = prev_; }

NoGradGuard::NoGradGuard() { ++t_nograd; }
NoGradGuard::~NoGradGuard() { --t_nograd; }

// ---------------------------------------------------------------------------
// Leaves

Var variable(Mat v) {
  if (!v.allFinite()) throw NumericError("non-finite entries in variable leaf");
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  return Var(std::move(n));
}

Var constant(Mat v) {
  if (!v.allFinite()) throw NumericError("non-finite entries in constant");
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return Var(std::move(n));
}

Var constant(double v) { return constant(Mat::Constant(1, 1, v)); }

Var detach(const Var& v) { return constant(v.value()); }

// ---------------------------------------------------------------------------
// Elementwise binary ops

Var add(const Var& a, const Var& b) {
  const Var* pa = &a;
  const Var* pb = &b;
  Bc bc;
  if (!classify(a.value(), b.value(), bc)) {
    if (classify(b.value(), a.value(), bc)) std::swap(pa, pb);  // commutative
    else shape_fail("add", a.value(), b.value());
  }
  Mat v = pa->value() + expand(pb->value(), pa->rows(), pa->cols(), bc);
  return make_op("add", std::move(v), {*pa, *pb},
                 [](const Var& out, const Var& g, const bool* need) {
                   std::vector<Var> gs(2);
                   Bc b2 = Bc::same;
                   classify(out.inputs()[0].value(), out.inputs()[1].value(), b2);
                   if (need[0]) gs[0] = g;
                   if (need[1]) gs[1] = reduce_to(g, b2);
                   return gs;
                 });
}

Var sub(const Var& a, const Var& b) {
  Bc bc;
  if (classify(a.value(), b.value(), bc)) {
    Mat v = a.value() - expand(b.value(), a.rows(), a.cols(), bc);
    return make_op("sub", std::move(v), {a, b},
                   [](const Var& out, const Var& g, const bool* need) {
                     std::vector<Var> gs(2);
                     Bc b2 = Bc::same;
                     classify(out.inputs()[0].value(), out.inputs()[1].value(), b2);
                     if (need[0]) gs[0] = g;
                     if (need[1]) gs[1] = scalar_mul(reduce_to(g, b2), -1.0);
                     return gs;
                   });
  }
  if (a.size() == 1) {  // scalar minus matrix
    Mat v = (a.value()(0, 0) - b.value().array()).matrix();
    return make_op("sub", std::move(v), {a, b},
                   [](const Var&, const Var& g, const bool* need) {
                     std::vector<Var> gs(2);
                     if (need[0]) gs[0] = sum(g);
                     if (need[1]) gs[1] = scalar_mul(g, -1.0);
                     return gs;
                   });
  }
  shape_fail("sub", a.value(), b.value());
}

Var mul(const Var& a, const Var& b) {
  const Var* pa = &a;
  const Var* pb = &b;
  Bc bc;
  if (!classify(a.value(), b.value(), bc)) {
    if (classify(b.value(), a.value(), bc)) std::swap(pa, pb);  // commutative
    else shape_fail("mul", a.value(), b.value());
  }
  Mat v = (pa->value().array() *
           expand(pb->value(), pa->rows(), pa->cols(), bc).array()).matrix();
  return make_op("mul", std::move(v), {*pa, *pb},
                 [](const Var& out, const Var& g, const bool* need) {
                   const Var& x = out.inputs()[0];
                   const Var& y = out.inputs()[1];
                   Bc b2 = Bc::same;
                   classify(x.value(), y.value(), b2);
                   std::vector<Var> gs(2);
                   if (need[0]) gs[0] = mul(g, y);
                   if (need[1]) gs[1] = reduce_to(mul(g, x), b2);
                   return gs;
                 });
}

Var div(const Var& a, const Var& b) {
  Bc bc;
  if (!classify(a.value(), b.value(), bc)) shape_fail("div", a.value(), b.value());
  Mat v = (a.value().array() /
           expand(b.value(), a.rows(), a.cols(), bc).array()).matrix();
  return make_op("div", std::move(v), {a, b},
                 [](const Var& out, const Var& g, const bool* need) {
                   const Var& x = out.inputs()[0];
                   const Var& y = out.inputs()[1];
                   Bc b2 = Bc::same;
                   classify(x.value(), y.value(), b2);
                   std::vector<Var> gs(2);
                   if (need[0]) gs[0] = div(g, y);
                   if (need[1])
                     gs[1] = scalar_mul(reduce_to(mul(g, div(out, y)), b2), -1.0);
                   return gs;
                 });
}

Var scalar_mul(const Var& a, double c) {
  if (!std::isfinite(c)) throw NumericError("non-finite scalar in op 'scalar_mul'");
  Mat v = a.value() * c;
  return make_op("scalar_mul", std::move(v), {a},
                 [c](const Var&, const Var& g, const bool* need) {
                   std::vector<Var> gs(1);
                   if (need[0]) gs[0] = scalar_mul(g, c);
                   return gs;
                 });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) shape_fail("matmul", a.value(), b.value());
  Mat v = a.value() * b.value();
  return make_op("matmul", std::move(v), {a, b},
                 [](const Var& out, const Var& g, const bool* need) {
                   std::vector<Var> gs(2);
                   if (need[0]) gs[0] = matmul(g, transpose(out.inputs()[1]));
                   if (need[1]) gs[1] = matmul(transpose(out.inputs()[0]), g);
                   return gs;
                 });
}

Var transpose(const Var& a) {
  Mat v = a.value().transpose();
  return make_op("transpose", std::move(v), {a},
                 [](const Var&, const Var& g, const bool* need) {
                   std::vector<Var> gs(1);
                   if (need[0]) gs[0] = transpose(g);
                   return gs;
                 });
}

// ---------------------------------------------------------------------------
// Reductions. All share the "broadcast the incoming gradient back" rule,
// which mul() handles through its scalar/row/column broadcast support.

namespace {
Var bcast_grad_vjp_make(const char* name, Mat&& v, const Var& a, double scale) {
  const Index r = a.rows(), c = a.cols();
  return make_op(name, std::move(v), {a},
                 [r, c, scale](const Var&, const Var& g, const bool* need) {
                   std::vector<Var> gs(1);
                   if (need[0]) gs[0] = mul(constant(Mat::Constant(r, c, scale)), g);
                   return gs;
                 });
}
}  // namespace

Var sum(const Var& a) {
  return bcast_grad_vjp_make("sum", Mat::Constant(1, 1, a.value().sum()), a, 1.0);
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.size());
  return bcast_grad_vjp_make("mean", Mat::Constant(1, 1, a.value().sum() / n), a, 1.0 / n);
}

Var rowsum(const Var& a) {
  Mat v = a.value().rowwise().sum();
  return bcast_grad_vjp_make("rowsum", std::move(v), a, 1.0);
}

Var colsum(const Var& a) {
  Mat v = a.value().colwise().sum();
  return bcast_grad_vjp_make("colsum", std::move(v), a, 1.0);
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

Var square(const Var& a) {
  Mat v = a.value().array().square().matrix();
  return make_op("square", std::move(v), {a},
                 [](const Var& out, const Var& g, const bool* need) {
                   std::vector<Var> gs(1);
                   if (need[0]) gs[0] = scalar_mul(mul(g, out.inputs()[0]), 2.0);
                   return gs;
                 });
}

Var sqrt(const Var& a) {
  Mat v = a.value().array().sqrt().matrix();
  return make_op("sqrt", std::move(v), {a},
                 [](const Var& out, const Var& g, const bool* need) {
                   std::vector<Var> gs(1);
                   if (need[0]) gs[0] = div(scalar_mul(g, 0.5), out);
                   return gs;
                 });
}

Var relu(const Var& a) {
  Mat v = a.value().array().max(0.0).matrix();
  return make_op("relu", std::move(v), {a},
                 [](const Var& out, const Var& g, const bool* need) {
                   std::vector<Var> gs(1);
                   if (need[0]) gs[0] = mul(g, step(out.inputs()[0]));
                   return gs;
                 });
}

// step and leaky_step are piecewise constant, so they are pure value
// functions: their outputs never require gradients and terminate every
// derivative chain (the almost-everywhere second derivative is zero).
Var step(const Var& a) {
  return constant((a.value().array() >= 0.0).cast<double>().matrix());
}

Var leaky_step(const Var& a, double beta) {
  Mat v = ((a.value().array() >= 0.0).cast<double>() * (1.0 - beta) + beta).matrix();
  return constant(std::move(v));
}

Var leaky_relu(const Var& a, double beta) {
  Mat v = a.value().array().max(beta * a.value().array()).matrix();
  return make_op("leaky_relu", std::move(v), {a},
                 [beta](const Var& out, const Var& g, const bool* need) {
                   std::vector<Var> gs(1);
                   if (need[0]) gs[0] = mul(g, leaky_step(out.inputs()[0], beta));
                   return gs;
                 });
}

Var sq_leaky_relu(const Var& a, double beta) {
  Mat m = a.value().array().max(beta * a.value().array()).matrix();
  Mat v = m.array().square().matrix();
  return make_op("sq_leaky_relu", std::move(v), {a},
                 [beta](const Var& out, const Var& g, const bool* need) {
                   std::vector<Var> gs(1);
                   if (need[0]) {
                     const Var& x = out.inputs()[0];
                     gs[0] = mul(g, scalar_mul(mul(leaky_relu(x, beta), leaky_step(x, beta)), 2.0));
                   }
                   return gs;
                 });
}

Var softplus(const Var& a) {
  // log(1 + e^x) in overflow-free form: max(x, 0) + log1p(e^{-|x|}).
  Mat v = (a.value().array().max(0.0) +
           (-a.value().array().abs()).exp().log1p()).matrix();
  return make_op("softplus", std::move(v), {a},
                 [](const Var& out, const Var& g, const bool* need) {
                   std::vector<Var> gs(1);
                   if (need[0]) gs[0] = mul(g, sigmoid(out.inputs()[0]));
                   return gs;
                 });
}

Var sigmoid(const Var& a) {
  Mat v(a.rows(), a.cols());
  const Mat& x = a.value();
  for (Index i = 0; i < x.rows(); ++i)
    for (Index j = 0; j < x.cols(); ++j) {
      const double t = x(i, j);
      if (t >= 0.0) {
        v(i, j) = 1.0 / (1.0 + std::exp(-t));
      } else {
        const double e = std::exp(t);
        v(i, j) = e / (1.0 + e);
      }
    }
  return make_op("sigmoid", std::move(v), {a},
                 [](const Var& out, const Var& g, const bool* need) {
                   std::vector<Var> gs(1);
                   if (need[0]) gs[0] = mul(g, mul(out, sub(constant(1.0), out)));
                   return gs;
                 });
}

Var rows_sqnorm(const Var& a) { return rowsum(square(a)); }

// ---------------------------------------------------------------------------
// Backward

GradMap backward(Tape& tape, const Var& out, const Mat& seed, bool create_graph,
                 const std::vector<Var>& targets, const std::vector<Var>& stops) {
  Node* on = out.node();
  if (on == nullptr || on->owner != &tape || on->id < 0)
    throw ShapeError("backward: output is not recorded on the given tape");
  if (seed.rows() != out.rows() || seed.cols() != out.cols())
    throw ShapeError("backward: seed shape does not match output shape");
  if (create_graph && Tape::active() != &tape)
    throw ShapeError("backward: create_graph requires the given tape to be active");

  std::unordered_set<const Node*> keep;
  for (const Var& t : targets) keep.insert(t.node());
  std::unordered_set<const Node*> stop;
  for (const Var& s : stops) stop.insert(s.node());

  // Path restriction: a node's gradient matters only if one of the targets is
  // reachable from it along input edges. Input ids are strictly smaller than
  // consumer ids, so one ascending scan settles reachability. A stop node is
  // opaque: paths through its inputs do not count.
  const bool restricted = !targets.empty();
  std::vector<char> reach;
  if (restricted) {
    reach.assign(static_cast<std::size_t>(on->id) + 1, 0);
    for (long id = 0; id <= on->id; ++id) {
      const Node* n = tape.node_at(id).get();
      char r = keep.count(n) ? 1 : 0;
      if (!r && !stop.count(n)) {
        for (std::size_t i = 0; !r && i < n->inputs.size(); ++i) {
          const Node* in = n->inputs[i].node();
          if (!in->requires_grad) continue;
          if (keep.count(in)) r = 1;
          else if (in->owner == &tape && in->id >= 0 && in->id <= on->id)
            r = reach[static_cast<std::size_t>(in->id)];
        }
      }
      reach[static_cast<std::size_t>(id)] = r;
    }
  }
  auto wanted = [&](const Var& v) -> bool {
    const Node* n = v.node();
    if (!n->requires_grad) return false;
    if (keep.count(n)) return true;
    if (stop.count(n)) return false;
    if (!restricted) return true;
    if (n->owner == &tape && n->id >= 0 && n->id <= on->id)
      return reach[static_cast<std::size_t>(n->id)] != 0;
    return false;
  };

  std::optional<NoGradGuard> nograd;
  if (!create_graph) nograd.emplace();

  std::unordered_map<const Node*, Var> grads;
  grads[on] = constant(seed);

  for (long id = on->id; id >= 0; --id) {
    // Copy, not reference: with create_graph the VJP calls below append nodes
    // to this tape, and vector growth would invalidate a reference into it.
    const std::shared_ptr<Node> np = tape.node_at(id);
    auto it = grads.find(np.get());
    if (it == grads.end()) continue;
    const Var g = it->second;
    if (np->vjp && !stop.count(np.get())) {
      const Var ov(np);
      const auto& ins = np->inputs;
      bool needbuf[8] = {false, false, false, false, false, false, false, false};
      bool any = false;
      for (std::size_t i = 0; i < ins.size(); ++i) {
        needbuf[i] = wanted(ins[i]);
        any = any || needbuf[i];
      }
      if (any) {
        std::vector<Var> gs = np->vjp(ov, g, needbuf);
        for (std::size_t i = 0; i < ins.size(); ++i) {
          if (!needbuf[i] || !gs[i].defined()) continue;
          if (gs[i].rows() != ins[i].rows() || gs[i].cols() != ins[i].cols())
            throw ShapeError(std::string("internal: gradient shape mismatch in op '") +
                             np->op + "'");
          auto slot = grads.find(ins[i].node());
          if (slot == grads.end()) grads.emplace(ins[i].node(), gs[i]);
          else slot->second = add(slot->second, gs[i]);
        }
      }
    }
    // A visited node's accumulated gradient has been fully consumed; keep it
    // only if the caller asked for it, so long sweeps stay memory-flat.
    if (!keep.count(np.get())) grads.erase(np.get());
  }

  GradMap gm;
  gm.g_ = std::move(grads);
  return gm;
}

GradMap backward(Tape& tape, const Var& out) {
  if (out.size() != 1) throw ShapeError("backward: output must be scalar (1x1)");
  return backward(tape, out, Mat::Ones(1, 1), /*create_graph=*/false);
}

Var GradMap::at(const Var& v) const {
  auto it = g_.find(v.node());
  if (it != g_.end()) return it->second;
  return constant(Mat::Zero(v.rows(), v.cols()));
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

double finite_diff_check(const std::function<Var(const Var&)>& f, const Mat& x, double h) {
  if (!(h > 0.0)) throw ShapeError("finite_diff_check: step must be positive");
  Mat g;
  {
    Tape tape;
    TapeScope scope(tape);
    Var v = variable(x);
    Var y = f(v);
    if (y.size() != 1) throw ShapeError("finite_diff_check: f must be scalar-valued");
    GradMap gm = backward(tape, y);
    g = gm.at(v).value();
  }
  NoGradGuard ng;
  double worst = 0.0;
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < x.cols(); ++j) {
      Mat xp = x, xm = x;
      xp(i, j) += h;
      xm(i, j) -= h;
      const double fp = f(constant(xp)).value()(0, 0);
      const double fm = f(constant(xm)).value()(0, 0);
      const double fd = (fp - fm) / (2.0 * h);
      const double denom = std::max({std::abs(fd), std::abs(g(i, j)), 1e-6});
      worst = std::max(worst, std::abs(g(i, j) - fd) / denom);
    }
  }
  return worst;
}

}  // namespace popdyn::ad
