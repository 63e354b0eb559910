#pragma once

// Evaluation metrics for predicted population trajectories: per-transition
// entropic transport losses, class-histogram distances, and nearest-neighbor
// label transfer from ground-truth clouds onto predictions.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "popdyn/common.hpp"
#include "popdyn/ot.hpp"

namespace popdyn::metrics {

// Integer class counts. counts[i] >= 0 and sum(counts) == total.
struct ClassHistogram {
  std::vector<long> counts;
  long total = 0;
};

// Per-transition transport losses between predicted and true clouds.
// w_eps is the raw entropic value W_eps (carries the entropic self-bias and is
// reported as-is); w_debiased is the Sinkhorn divergence, which is zero for a
// perfect prediction. converged mirrors the raw solves step by step.
struct StepLossReport {
  std::vector<double> w_eps;
  std::vector<double> w_debiased;
  std::vector<bool> converged;

  double mean_w_eps() const;       // 0 when empty
  double mean_w_debiased() const;  // 0 when empty
};

// Mean and sample standard deviation (n-1 denominator; 0 when n < 2).
struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};
MeanStd mean_std(const std::vector<double>& values);

// Compares preds[i] to truths[i] with uniform weights. Sequences must have
// equal length and matching point dimension (ShapeError). The debiased value
// inherits the divergence's convergence policy (NumericError on failure).
StepLossReport prediction_loss_per_step(const std::vector<Mat>& preds,
                                        const std::vector<Mat>& truths, double eps,
                                        const ot::SinkhornConfig& cfg = {1e-6, 20000});

// Squared Hellinger distance between the normalized histograms:
//   H^2(a, b) = 1/2 * sum_i (sqrt(a_i/|a|) - sqrt(b_i/|b|))^2, in [0, 1].
// Throws ShapeError on class-count mismatch, DataError on a zero-total or
// negative histogram.
double hellinger(const ClassHistogram& a, const ClassHistogram& b);

// l1 distance on raw counts: sum_i |a_i - b_i|. ShapeError on mismatch.
double l1_histogram(const ClassHistogram& a, const ClassHistogram& b);

// Euclidean k-nearest-neighbor majority vote. Vote ties go to the smallest
// class id; distance ties to the smallest training index, so results are
// deterministic. Requires 1 <= k <= #train (ConfigError), a nonempty training
// set (DataError), and matching dims / label count (ShapeError).
std::vector<int> knn_classify(const Mat& train_points, const std::vector<int>& train_labels,
                              const Mat& queries, int k);

// Counts labels into k_classes bins. Labels outside [0, k_classes) are a
// DataError; k_classes < 1 is a ConfigError.
ClassHistogram class_histogram(const std::vector<int>& labels, int k_classes);

// One row of a machine-readable metric summary.
struct MetricRow {
  std::string metric;
  std::string mode;
  int step = 0;
  double value = 0.0;
  std::uint64_t seed = 0;
};

// Writes "metric,mode,step,value,seed" CSV with a header, full double
// precision.
void write_metric_rows(std::ostream& os, const std::vector<MetricRow>& rows);

}  // namespace popdyn::metrics
