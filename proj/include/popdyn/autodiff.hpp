#pragma once

// Reverse-mode automatic differentiation over dense 64-bit matrices.
//
// Design: define-by-run. Operations executed while a Tape is active (and at
// least one operand requires gradients) append a node to that tape; the tape's
// creation order is a topological order of the resulting DAG, so backward() is
// a single reverse sweep that visits each node at most once.
//
// Every derivative rule is itself expressed in terms of these same primitive
// operations. When backward() runs with create_graph=true the rule evaluations
// are recorded like any other op, which makes computed gradients themselves
// differentiable quantities. That is what lets an optimizer's unrolled update
// trajectory be differentiated end to end without any dedicated higher-order
// machinery.
//
// Values are logically rank <= 2: scalars are 1x1, vectors are n x 1 (or 1 x m
// for row layouts), matrices are n x m. Point clouds are rows-as-points.
// Non-finite results raise NumericError at the operation boundary.

#include "popdyn/common.hpp"

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

namespace popdyn::ad {

class Tape;
class Var;

struct Node {
  Mat value;
  bool requires_grad = false;
  long id = -1;          // position on the owning tape; -1 when not recorded
  Tape* owner = nullptr;
  const char* op = "leaf";
  std::vector<Var> inputs;
  // Gradient rule: given this node (as `out`) and the incoming gradient,
  // return one gradient per input. Slots whose `need` flag is false may be
  // left default-constructed. Implementations read operands from out.inputs().
  std::function<std::vector<Var>(const Var& out, const Var& gout, const bool* need)> vjp;
};

// Value-semantic handle to a node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  bool defined() const { return n_ != nullptr; }
  const Mat& value() const { return n_->value; }
  Index rows() const { return n_->value.rows(); }
  Index cols() const { return n_->value.cols(); }
  Index size() const { return n_->value.size(); }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  Node* node() const { return n_.get(); }
  std::shared_ptr<Node> node_ptr() const { return n_; }
  const std::vector<Var>& inputs() const { return n_->inputs; }

 private:
  std::shared_ptr<Node> n_;
};

// Append-only record of operations. Owns its nodes; destruction tears the
// graph down iteratively (never by shared_ptr recursion), so arbitrarily long
// tapes are safe.
class Tape {
 public:
  Tape() = default;
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  long size() const { return static_cast<long>(nodes_.size()); }
  const std::shared_ptr<Node>& node_at(long id) const { return nodes_[static_cast<std::size_t>(id)]; }

  static Tape* active();        // tape ops currently record onto, or nullptr
  static bool recording();      // active tape present and not suspended

  // Used by the op constructor; not part of the public surface.
  void append(std::shared_ptr<Node> n);

 private:
  std::vector<std::shared_ptr<Node>> nodes_;
};

// Makes a tape the active recording target for the current thread (RAII).
class TapeScope {
 public:
  explicit TapeScope(Tape& t);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Suspends recording (RAII, nestable). Operations run value-only.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Gradients produced by backward(), keyed by node. Absent entries read as
// zero matrices of the queried variable's shape.
class GradMap {
 public:
  Var at(const Var& v) const;
  bool contains(const Var& v) const { return g_.count(v.node()) != 0; }

  std::unordered_map<const Node*, Var> g_;
};

// Leaf constructors. `variable` participates in gradients; `constant` never
// does. Both validate finiteness.
Var variable(Mat v);
Var constant(Mat v);
Var constant(double v);
Var detach(const Var& v);

// Primitive operations. Elementwise binary ops accept equal shapes or a
// broadcast second operand (1x1 scalar, 1xm row, nx1 column); `add` and `mul`
// also accept a broadcast first operand by symmetry, and `sub` additionally
// accepts a 1x1 first operand.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scalar_mul(const Var& a, double c);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var sum(const Var& a);      // -> 1x1
Var mean(const Var& a);     // -> 1x1
Var rowsum(const Var& a);   // n x m -> n x 1
Var colsum(const Var& a);   // n x m -> 1 x m
Var square(const Var& a);
Var sqrt(const Var& a);
Var relu(const Var& a);                       // max(x, 0)
Var step(const Var& a);                       // d/dx relu; 1 at x >= 0 (right-derivative at the kink)
Var leaky_relu(const Var& a, double beta);    // max(beta*x, x)
Var leaky_step(const Var& a, double beta);    // d/dx leaky_relu; slope 1 at x = 0
Var sq_leaky_relu(const Var& a, double beta); // max(beta*x, x)^2
Var softplus(const Var& a);
Var sigmoid(const Var& a);
Var rows_sqnorm(const Var& a);                // n x m -> n x 1, squared row norms

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double c, const Var& a) { return scalar_mul(a, c); }
inline Var operator*(const Var& a, double c) { return scalar_mul(a, c); }
inline Var operator-(const Var& a) { return scalar_mul(a, -1.0); }

// Reverse sweep from `out` (which must be recorded on `tape`), seeding with
// `seed` (same shape as out). With create_graph=true the produced gradients
// are recorded and therefore differentiable. `targets`, when non-empty,
// restricts propagation to paths that can reach one of the listed variables;
// gradients for other nodes are neither stored nor computed. `stops` are
// treated as leaves: a stop that is also a target still collects its
// gradient, but the sweep never descends through a stop's own inputs. This
// is how a partial derivative is taken with respect to one argument while
// other graph-produced quantities are held fixed as parameters.
GradMap backward(Tape& tape, const Var& out, const Mat& seed, bool create_graph,
                 const std::vector<Var>& targets = {}, const std::vector<Var>& stops = {});
// Scalar convenience overload: seed 1, no graph, unrestricted.
GradMap backward(Tape& tape, const Var& out);

// Oracle: max over coordinates of |analytic - central difference| divided by
// max(|analytic|, |difference|, 1e-6). `f` must be scalar-valued.
double finite_diff_check(const std::function<Var(const Var&)>& f, const Mat& x, double h);

}  // namespace popdyn::ad
