#include "popdyn/metrics.hpp"

#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <vector>

using namespace popdyn;
using metrics::ClassHistogram;

namespace {

// Independent reference: full sort by (distance, index), majority vote with
// smallest-class-id tie-breaking.
std::vector<int> knn_oracle(const Mat& train, const std::vector<int>& labels, const Mat& queries,
                            int k) {
  std::vector<int> out;
  for (Index q = 0; q < queries.rows(); ++q) {
    std::vector<std::pair<double, Index>> dist;
    for (Index i = 0; i < train.rows(); ++i)
      dist.emplace_back((train.row(i) - queries.row(q)).squaredNorm(), i);
    std::sort(dist.begin(), dist.end());
    std::map<int, long> votes;
    for (int h = 0; h < k; ++h) ++votes[labels[static_cast<std::size_t>(dist[h].second)]];
    long best = -1;
    int lab = 0;
    for (const auto& [l, c] : votes)
      if (c > best) {  // map iterates ascending label, so '>' keeps the smallest on ties
        best = c;
        lab = l;
      }
    out.push_back(lab);
  }
  return out;
}

ClassHistogram hist(std::vector<long> counts) {
  ClassHistogram h;
  h.total = 0;
  for (long c : counts) h.total += c;
  h.counts = std::move(counts);
  return h;
}

}  // namespace

TEST_CASE("hellinger matches hand-computed values") {
  CHECK(metrics::hellinger(hist({3, 5, 2}), hist({3, 5, 2})) == 0.0);
  CHECK(metrics::hellinger(hist({1, 0}), hist({0, 1})) == doctest::Approx(1.0).epsilon(1e-15));
  // (1,1) vs (1,0): 1/2 * [(sqrt(0.5)-1)^2 + 0.5] = 1 - sqrt(2)/2
  const double expected = 1.0 - std::sqrt(2.0) / 2.0;
  CHECK(metrics::hellinger(hist({1, 1}), hist({1, 0})) ==
        doctest::Approx(expected).epsilon(1e-12));
  CHECK(metrics::hellinger(hist({1, 1}), hist({1, 0})) == doctest::Approx(0.2929).epsilon(1e-4));

  SUBCASE("scale invariance of the normalized form") {
    CHECK(metrics::hellinger(hist({2, 2}), hist({500, 0})) ==
          doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("symmetry and bounds on random histograms") {
    Rng rng(404);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<long> a(6), b(6);
      long ta = 0, tb = 0;
      for (int i = 0; i < 6; ++i) {
        a[static_cast<std::size_t>(i)] = rng.uniform_int(0, 20);
        b[static_cast<std::size_t>(i)] = rng.uniform_int(0, 20);
        ta += a[static_cast<std::size_t>(i)];
        tb += b[static_cast<std::size_t>(i)];
      }
      if (ta == 0 || tb == 0) continue;
      const double ab = metrics::hellinger(hist(a), hist(b));
      const double ba = metrics::hellinger(hist(b), hist(a));
      CHECK(ab == ba);
      CHECK(ab >= 0.0);
      CHECK(ab <= 1.0 + 1e-15);
    }
  }
  SUBCASE("validation") {
    CHECK_THROWS_AS(metrics::hellinger(hist({1, 2}), hist({1, 2, 3})), ShapeError);
    CHECK_THROWS_AS(metrics::hellinger(hist({0, 0}), hist({1, 1})), DataError);
    CHECK_THROWS_AS(metrics::hellinger(hist({1, 1}), hist({0, 0})), DataError);
    ClassHistogram broken;
    broken.counts = {1, 1};
    broken.total = 5;  // inconsistent
    CHECK_THROWS_AS(metrics::hellinger(broken, hist({1, 1})), DataError);
    ClassHistogram negative;
    negative.counts = {-1, 2};
    negative.total = 1;
    CHECK_THROWS_AS(metrics::hellinger(negative, hist({1, 1})), DataError);
  }
}

TEST_CASE("l1 histogram distance on raw counts") {
  CHECK(metrics::l1_histogram(hist({4, 4}), hist({4, 4})) == 0.0);
  CHECK(metrics::l1_histogram(hist({3, 0}), hist({0, 3})) == 6.0);
  CHECK(metrics::l1_histogram(hist({0, 0}), hist({0, 0})) == 0.0);  // zero mass allowed here

  SUBCASE("matches loop oracle") {
    Rng rng(405);
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<long> a(5), b(5);
      double expect = 0.0;
      for (int i = 0; i < 5; ++i) {
        a[static_cast<std::size_t>(i)] = rng.uniform_int(0, 100);
        b[static_cast<std::size_t>(i)] = rng.uniform_int(0, 100);
        expect += std::abs(static_cast<double>(a[static_cast<std::size_t>(i)] -
                                               b[static_cast<std::size_t>(i)]));
      }
      CHECK(metrics::l1_histogram(hist(a), hist(b)) == expect);
    }
  }
  SUBCASE("validation") {
    CHECK_THROWS_AS(metrics::l1_histogram(hist({1}), hist({1, 2})), ShapeError);
  }
}

TEST_CASE("class_histogram counts labels") {
  ClassHistogram h = metrics::class_histogram({0, 0, 1}, 3);
  CHECK(h.counts == std::vector<long>{2, 1, 0});
  CHECK(h.total == 3);

  ClassHistogram empty = metrics::class_histogram({}, 4);
  CHECK(empty.counts == std::vector<long>{0, 0, 0, 0});
  CHECK(empty.total == 0);

  Rng rng(406);
  std::vector<int> labels;
  for (int i = 0; i < 137; ++i) labels.push_back(rng.uniform_int(0, 6));
  ClassHistogram big = metrics::class_histogram(labels, 7);
  long sum = 0;
  for (long c : big.counts) sum += c;
  CHECK(sum == big.total);
  CHECK(big.total == 137);

  CHECK_THROWS_AS(metrics::class_histogram({0, 3}, 3), DataError);
  CHECK_THROWS_AS(metrics::class_histogram({-1}, 3), DataError);
  CHECK_THROWS_AS(metrics::class_histogram({0}, 0), ConfigError);
}

TEST_CASE("knn_classify") {
  SUBCASE("query on a training point with k=1 returns its label") {
    Rng rng(407);
    Mat train = rng.normal_mat(20, 3, 1.0);
    std::vector<int> labels;
    for (int i = 0; i < 20; ++i) labels.push_back(rng.uniform_int(0, 4));
    Mat queries = train.middleRows(4, 6);
    std::vector<int> got = metrics::knn_classify(train, labels, queries, 1);
    for (int i = 0; i < 6; ++i) CHECK(got[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(i + 4)]);
  }
  SUBCASE("well-separated clusters vote their own label") {
    Rng rng(408);
    Mat train(40, 2);
    std::vector<int> labels;
    train.topRows(20) = rng.normal_mat(20, 2, 0.2);                       // cluster 0 at origin
    train.bottomRows(20) = rng.normal_mat(20, 2, 0.2).array() + 100.0;    // cluster 1 far away
    for (int i = 0; i < 40; ++i) labels.push_back(i < 20 ? 0 : 1);
    Mat q(2, 2);
    q << 0.1, -0.2, 100.3, 99.8;
    for (int k : {1, 3, 5, 19}) {
      std::vector<int> got = metrics::knn_classify(train, labels, q, k);
      CHECK(got == std::vector<int>{0, 1});
    }
  }
  SUBCASE("agrees with brute-force oracle on 100 points") {
    Rng rng(409);
    Mat train = rng.normal_mat(100, 4, 1.0);
    std::vector<int> labels;
    for (int i = 0; i < 100; ++i) labels.push_back(rng.uniform_int(0, 5));
    Mat queries = rng.normal_mat(60, 4, 1.2);
    for (int k : {1, 5, 17}) {
      std::vector<int> got = metrics::knn_classify(train, labels, queries, k);
      std::vector<int> want = knn_oracle(train, labels, queries, k);
      CHECK(got == want);
    }
  }
  SUBCASE("vote tie goes to the smallest class id") {
    Mat train(2, 1);
    train << -1.0, 1.0;
    std::vector<int> labels{3, 1};
    Mat q(1, 1);
    q << 0.0;  // equidistant, k=2 -> one vote each -> class 1 wins
    CHECK(metrics::knn_classify(train, labels, q, 2) == std::vector<int>{1});
  }
  SUBCASE("distance tie goes to the smallest training index") {
    Mat train(2, 1);
    train << 1.0, -1.0;
    std::vector<int> labels{7, 2};
    Mat q(1, 1);
    q << 0.0;  // k=1: both at distance 1, index 0 wins -> label 7
    CHECK(metrics::knn_classify(train, labels, q, 1) == std::vector<int>{7});
  }
  SUBCASE("validation") {
    Mat train = Mat::Zero(3, 2);
    std::vector<int> labels{0, 1, 2};
    Mat q = Mat::Zero(1, 2);
    CHECK_THROWS_AS(metrics::knn_classify(Mat(0, 2), {}, q, 1), DataError);
    CHECK_THROWS_AS(metrics::knn_classify(train, labels, q, 0), ConfigError);
    CHECK_THROWS_AS(metrics::knn_classify(train, labels, q, 4), ConfigError);
    CHECK_THROWS_AS(metrics::knn_classify(train, {0, 1}, q, 1), ShapeError);
    CHECK_THROWS_AS(metrics::knn_classify(train, labels, Mat::Zero(1, 3), 1), ShapeError);
  }
}

TEST_CASE("prediction_loss_per_step") {
  Rng rng(410);

  SUBCASE("perfect prediction keeps the entropic self-cost, zero debiased") {
    std::vector<Mat> truths{rng.normal_mat(12, 2, 1.0), rng.normal_mat(12, 2, 1.5)};
    metrics::StepLossReport rep = metrics::prediction_loss_per_step(truths, truths, 0.5);
    REQUIRE(rep.w_eps.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
      ot::DiscreteMeasure m = ot::DiscreteMeasure::uniform(truths[i]);
      const double self = ot::sinkhorn(m, m, 0.5, {1e-6, 20000}).value;
      CHECK(rep.w_eps[i] == doctest::Approx(self).epsilon(1e-12));
      CHECK(std::abs(rep.w_debiased[i]) < 1e-9);
      CHECK(rep.converged[i]);
    }
    CHECK(rep.mean_w_eps() == doctest::Approx((rep.w_eps[0] + rep.w_eps[1]) / 2).epsilon(1e-15));
  }
  SUBCASE("single atoms at eps=1: |x-y|^2 - 1") {
    Mat x(1, 2), y(1, 2);
    x << 0.0, 0.0;
    y << 3.0, 4.0;  // squared distance 25
    metrics::StepLossReport rep = metrics::prediction_loss_per_step({x}, {y}, 1.0);
    CHECK(rep.w_eps[0] == doctest::Approx(24.0).epsilon(1e-10));
    CHECK(rep.w_debiased[0] == doctest::Approx(25.0).epsilon(1e-10));
  }
  SUBCASE("permutation invariance") {
    Mat pred = rng.normal_mat(15, 2, 1.0);
    Mat truth = rng.normal_mat(15, 2, 1.0);
    Mat shuffled(15, 2);
    std::vector<Index> perm = Rng(42).sample_without_replacement(15, 15);
    for (Index i = 0; i < 15; ++i) shuffled.row(perm[static_cast<std::size_t>(i)]) = pred.row(i);
    metrics::StepLossReport a = metrics::prediction_loss_per_step({pred}, {truth}, 0.7);
    metrics::StepLossReport b = metrics::prediction_loss_per_step({shuffled}, {truth}, 0.7);
    CHECK(a.w_eps[0] == doctest::Approx(b.w_eps[0]).epsilon(1e-9));
    CHECK(a.w_debiased[0] == doctest::Approx(b.w_debiased[0]).epsilon(1e-9));
  }
  SUBCASE("validation") {
    Mat a = Mat::Zero(3, 2), b = Mat::Zero(3, 2);
    CHECK_THROWS_AS(metrics::prediction_loss_per_step({a, a}, {b}, 1.0), ShapeError);
    CHECK_THROWS_AS(metrics::prediction_loss_per_step({Mat::Zero(3, 3)}, {b}, 1.0), ShapeError);
  }
}

TEST_CASE("mean_std aggregates runs") {
  metrics::MeanStd r = metrics::mean_std({1.0, 2.0, 3.0, 4.0});
  CHECK(r.mean == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(r.std == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-14));
  CHECK(metrics::mean_std({7.0}).std == 0.0);
  CHECK(metrics::mean_std({7.0}).mean == 7.0);
  CHECK(metrics::mean_std({}).mean == 0.0);
}

TEST_CASE("metric rows export as CSV") {
  std::ostringstream os;
  metrics::write_metric_rows(os, {{"w_eps", "one-step", 2, 0.5, 11},
                                  {"hellinger", "all-steps", 0, 0.25, 12}});
  CHECK(os.str() ==
        "metric,mode,step,value,seed\n"
        "w_eps,one-step,2,0.5,11\n"
        "hellinger,all-steps,0,0.25,12\n");
}
