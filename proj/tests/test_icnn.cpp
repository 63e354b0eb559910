#include "popdyn/icnn.hpp"

#include "doctest.h"
#include "testutil.hpp"

#include <cmath>

using namespace popdyn;
namespace icnn = popdyn::icnn;
using ad::Var;

namespace {

icnn::IcnnParams zero_params(const icnn::IcnnShape& shape) {
  icnn::IcnnParams p = icnn::init_icnn(shape, 0);
  for (Mat& m : p.wx) m.setZero();
  for (Mat& m : p.wz) m.setZero();
  for (Mat& m : p.b) m.setZero();
  return p;
}

}  // namespace

TEST_CASE("initialization produces the documented architecture") {
  icnn::IcnnShape shape = icnn::IcnnShape::make(2);
  icnn::IcnnParams p = icnn::init_icnn(shape, 7);
  REQUIRE(p.wx.size() == 4);
  REQUIRE(p.wz.size() == 3);
  REQUIRE(p.b.size() == 4);
  for (std::size_t l = 0; l < 4; ++l) {
    CHECK(p.wx[l].rows() == 2);
    CHECK(p.wx[l].cols() == shape.widths[l]);
    CHECK(p.b[l].rows() == 1);
    CHECK(p.b[l].cols() == shape.widths[l]);
    CHECK(p.b[l].isZero(0.0));
  }
  CHECK(p.wx[0].cols() == 64);
  CHECK(p.wz[0].rows() == 64);
  CHECK(p.wz[0].cols() == 64);
  CHECK(p.wz[1].rows() == 64);
  CHECK(p.wz[1].cols() == 64);
  CHECK(p.wz[2].rows() == 64);
  CHECK(p.wz[2].cols() == 1);
  for (const Mat& m : p.wz) CHECK((m.array() >= 0.0).all());
  // weights are a clamped 0.1-scale draw, not degenerate
  CHECK(p.wx[0].cwiseAbs().maxCoeff() > 0.0);
  CHECK(p.wx[0].cwiseAbs().maxCoeff() < 1.0);

  icnn::IcnnParams q = icnn::init_icnn(shape, 7);
  for (std::size_t l = 0; l < 4; ++l) CHECK(p.wx[l] == q.wx[l]);
  for (std::size_t l = 0; l < 3; ++l) CHECK(p.wz[l] == q.wz[l]);
  icnn::IcnnParams r = icnn::init_icnn(shape, 8);
  CHECK(p.wx[0] != r.wx[0]);
}

TEST_CASE("shape validation") {
  CHECK_THROWS_AS((void)icnn::IcnnShape::make(0), ConfigError);
  CHECK_THROWS_AS((void)icnn::IcnnShape::make(2, 64, 0), ConfigError);
  icnn::IcnnShape bad;
  bad.widths = {64, 2};  // final width must be 1
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("single-layer closed form: squared linear response") {
  icnn::IcnnParams p;
  p.shape.input_dim = 1;
  p.shape.widths = {1};
  p.shape.beta = 1.0;  // slope 1 turns the squared leaky relu into plain squaring
  p.wx = {Mat::Constant(1, 1, 0.7)};
  p.b = {Mat::Zero(1, 1)};
  Mat x(3, 1);
  x << -2.0, 0.5, 3.0;
  Vec v = icnn::values(p, x);
  for (Index i = 0; i < 3; ++i)
    CHECK(v(i) == doctest::Approx(std::pow(0.7 * x(i, 0), 2)).epsilon(1e-12));
}

TEST_CASE("batch evaluation equals the per-point loop") {
  icnn::IcnnParams p = icnn::init_icnn(icnn::IcnnShape::make(3, 8, 3), 11);
  Mat x = testutil::random_mat(6, 3, 201);
  Vec batch = icnn::values(p, x);
  for (Index i = 0; i < x.rows(); ++i) {
    Vec one = icnn::values(p, x.row(i));
    CHECK(batch(i) == one(0));
  }
}

TEST_CASE("convexity inequality holds on 1000 random triples") {
  icnn::IcnnParams p = icnn::init_icnn(icnn::IcnnShape::make(2), 13);
  Rng rng(202);
  Mat xs = rng.normal_mat(1000, 2, 2.0);
  Mat ys = rng.normal_mat(1000, 2, 2.0);
  Vec lam(1000);
  for (Index i = 0; i < 1000; ++i) lam(i) = rng.uniform(0.0, 1.0);
  Mat mids(1000, 2);
  for (Index i = 0; i < 1000; ++i)
    mids.row(i) = lam(i) * xs.row(i) + (1.0 - lam(i)) * ys.row(i);
  Vec fx = icnn::values(p, xs), fy = icnn::values(p, ys), fm = icnn::values(p, mids);
  for (Index i = 0; i < 1000; ++i)
    CHECK(fm(i) <= lam(i) * fx(i) + (1.0 - lam(i)) * fy(i) + 1e-9);
}

TEST_CASE("gradient map closed forms") {
  icnn::IcnnShape shape = icnn::IcnnShape::make(2, 8, 3);
  icnn::IcnnParams zero = zero_params(shape);
  Mat x = testutil::random_mat(5, 2, 203);
  SUBCASE("zero potential with unit augmentation is the identity") {
    Mat t = icnn::gradient_map(zero, x, 1.0);
    CHECK(t == x);
    CHECK(icnn::pushforward(zero, x, 1.0) == x);
  }
  SUBCASE("zero potential with ell=0.8 contracts toward the origin") {
    Mat t = icnn::pushforward(zero, x, 0.8);
    CHECK(t.isApprox(0.8 * x, 1e-15));
  }
  SUBCASE("row count is always preserved") {
    icnn::IcnnParams p = icnn::init_icnn(shape, 17);
    CHECK(icnn::pushforward(p, x, 0.3).rows() == x.rows());
    CHECK(icnn::pushforward(p, x, 0.3).cols() == x.cols());
  }
}

TEST_CASE("gradient map matches finite differences of the potential") {
  icnn::IcnnParams p = icnn::init_icnn(icnn::IcnnShape::make(2), 19);
  Mat x = testutil::random_mat(4, 2, 204);
  const double h = 1e-6;
  for (double ell : {0.0, 0.8}) {
    Mat g = icnn::gradient_map(p, x, ell);
    for (Index i = 0; i < x.rows(); ++i)
      for (Index j = 0; j < x.cols(); ++j) {
        Mat xp = x, xm = x;
        xp(i, j) += h;
        xm(i, j) -= h;
        const double fp =
            icnn::values(p, xp.row(i))(0) + 0.5 * ell * xp.row(i).squaredNorm();
        const double fm =
            icnn::values(p, xm.row(i))(0) + 0.5 * ell * xm.row(i).squaredNorm();
        const double fd = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::abs(fd), std::abs(g(i, j)), 1e-6});
        CHECK(std::abs(g(i, j) - fd) / denom < 1e-4);
      }
  }
}

TEST_CASE("augmented map is strongly monotone") {
  const double ell = 0.8;
  icnn::IcnnParams p = icnn::init_icnn(icnn::IcnnShape::make(2), 23);
  Rng rng(205);
  for (int k = 0; k < 200; ++k) {
    Mat x = rng.normal_mat(1, 2, 2.0);
    Mat y = rng.normal_mat(1, 2, 2.0);
    Mat tx = icnn::gradient_map(p, x, ell);
    Mat ty = icnn::gradient_map(p, y, ell);
    const double lhs = ((tx - ty).array() * (x - y).array()).sum();
    CHECK(lhs >= ell * (x - y).squaredNorm() - 1e-9);
  }
}

TEST_CASE("nonnegativity projection") {
  icnn::IcnnParams p = icnn::init_icnn(icnn::IcnnShape::make(2, 4, 3), 29);
  p.wz[0](1, 2) = -0.3;
  p.wz[1](3, 0) = -1.5;
  Mat wx_before = p.wx[0];
  icnn::project_nonnegative(p);
  CHECK(p.wz[0](1, 2) == 0.0);
  CHECK(p.wz[1](3, 0) == 0.0);
  CHECK((p.wz[0].array() >= 0.0).all());
  CHECK(p.wx[0] == wx_before);
  icnn::IcnnParams q = p;
  icnn::project_nonnegative(q);  // idempotent
  for (std::size_t l = 0; l < p.wz.size(); ++l) CHECK(q.wz[l] == p.wz[l]);

  // taped form does the same clamp
  icnn::IcnnParams neg = icnn::init_icnn(icnn::IcnnShape::make(2, 4, 3), 31);
  neg.wz[0](0, 0) = -2.0;
  ad::Tape tape;
  ad::TapeScope scope(tape);
  icnn::IcnnVars v = icnn::project_nonnegative(icnn::IcnnVars::from(neg));
  CHECK(v.wz[0].value()(0, 0) == 0.0);
  icnn::IcnnParams back = v.to_params();
  icnn::project_nonnegative(neg);
  CHECK(back.wz[0] == neg.wz[0]);

  // convexity holds again after projecting a corrupted network
  Rng rng(206);
  icnn::IcnnParams c = icnn::init_icnn(icnn::IcnnShape::make(2), 37);
  c.wz[1] -= Mat::Constant(c.wz[1].rows(), c.wz[1].cols(), 0.05);
  icnn::project_nonnegative(c);
  for (int k = 0; k < 100; ++k) {
    Mat x = rng.normal_mat(1, 2, 2.0), y = rng.normal_mat(1, 2, 2.0);
    const double lam = rng.uniform(0.0, 1.0);
    Mat mid = lam * x + (1.0 - lam) * y;
    CHECK(icnn::values(c, mid)(0) <=
          lam * icnn::values(c, x)(0) + (1.0 - lam) * icnn::values(c, y)(0) + 1e-9);
  }
}

TEST_CASE("convexity penalty formula") {
  icnn::IcnnParams p = icnn::init_icnn(icnn::IcnnShape::make(2, 4, 3), 41);
  CHECK(icnn::convexity_penalty(p, 1.0) == 0.0);  // init is already clamped
  p.wz[0](2, 1) = -2.0;
  CHECK(icnn::convexity_penalty(p, 1.0) == doctest::Approx(4.0));
  CHECK(icnn::convexity_penalty(p, 0.5) == doctest::Approx(2.0));
  p.wz[1](0, 0) = -0.25;
  double loop = 0.0;
  for (const Mat& m : p.wz)
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j)
        if (m(i, j) < 0.0) loop += m(i, j) * m(i, j);
  CHECK(icnn::convexity_penalty(p, 1.3) == doctest::Approx(1.3 * loop).epsilon(1e-12));
  CHECK_THROWS_AS((void)icnn::convexity_penalty(p, -1.0), ConfigError);
}

TEST_CASE("losses built on the gradient map are differentiable in the weights") {
  icnn::IcnnShape shape = icnn::IcnnShape::make(1, 2, 2);
  icnn::IcnnParams p = icnn::init_icnn(shape, 43);
  p.wz[0] = p.wz[0].array() + 0.3;  // keep latent path active
  Mat x(3, 1);
  x << -1.2, 0.4, 2.1;

  auto loss_value = [&](const icnn::IcnnParams& q) {
    return icnn::gradient_map(q, x, 0.5).squaredNorm();
  };

  ad::Tape tape;
  ad::TapeScope scope(tape);
  icnn::IcnnVars v = icnn::IcnnVars::from(p);
  Var xv = ad::variable(x);
  Var t = icnn::gradient_map(tape, v, xv, 0.5, /*create_graph=*/true);
  Var loss = ad::sum(ad::square(t));
  CHECK(loss.value()(0, 0) == doctest::Approx(loss_value(p)).epsilon(1e-12));
  ad::GradMap g = ad::backward(tape, loss, Mat::Ones(1, 1), false, v.flat());

  const double h = 1e-6;
  auto fd_check = [&](const Var& block, std::vector<Mat> icnn::IcnnParams::* field,
                      std::size_t idx, Index i, Index j) {
    icnn::IcnnParams qp = p, qm = p;
    ((qp.*field)[idx])(i, j) += h;
    ((qm.*field)[idx])(i, j) -= h;
    const double fd = (loss_value(qp) - loss_value(qm)) / (2.0 * h);
    const double an = g.at(block).value()(i, j);
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
    CHECK(std::abs(an - fd) / denom < 1e-4);
  };
  fd_check(v.wx[0], &icnn::IcnnParams::wx, 0, 0, 0);
  fd_check(v.wx[0], &icnn::IcnnParams::wx, 0, 0, 1);
  fd_check(v.wx[1], &icnn::IcnnParams::wx, 1, 0, 0);
  fd_check(v.wz[0], &icnn::IcnnParams::wz, 0, 1, 0);
  fd_check(v.b[0], &icnn::IcnnParams::b, 0, 0, 1);
}

TEST_CASE("flat block order round-trips") {
  icnn::IcnnParams p = icnn::init_icnn(icnn::IcnnShape::make(2, 4, 3), 47);
  icnn::IcnnVars v = icnn::IcnnVars::from(p);
  std::vector<Var> blocks = v.flat();
  CHECK(blocks.size() == 3 * 3 - 1);
  icnn::IcnnVars w = icnn::IcnnVars::from_flat(p.shape, blocks);
  icnn::IcnnParams q = w.to_params();
  for (std::size_t l = 0; l < p.wx.size(); ++l) CHECK(q.wx[l] == p.wx[l]);
  for (std::size_t l = 0; l < p.wz.size(); ++l) CHECK(q.wz[l] == p.wz[l]);
  for (std::size_t l = 0; l < p.b.size(); ++l) CHECK(q.b[l] == p.b[l]);
  std::vector<Var> short_list(blocks.begin(), blocks.end() - 1);
  CHECK_THROWS_AS((void)icnn::IcnnVars::from_flat(p.shape, short_list), ShapeError);
}
