#include "popdyn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

namespace popdyn::metrics {

namespace {

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Normalized count with shared validation for the histogram distances.
void check_histograms(const ClassHistogram& a, const ClassHistogram& b, bool need_mass) {
  if (a.counts.size() != b.counts.size())
    throw ShapeError("histograms have different class counts: " +
                     std::to_string(a.counts.size()) + " vs " + std::to_string(b.counts.size()));
  for (const ClassHistogram* h : {&a, &b}) {
    long sum = 0;
    for (long c : h->counts) {
      if (c < 0) throw DataError("histogram has a negative count");
      sum += c;
    }
    if (sum != h->total) throw DataError("histogram counts do not sum to its total");
    if (need_mass && sum == 0) throw DataError("histogram has zero total mass");
  }
}

}  // namespace

double StepLossReport::mean_w_eps() const { return mean_of(w_eps); }
double StepLossReport::mean_w_debiased() const { return mean_of(w_debiased); }

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd r;
  r.mean = mean_of(values);
  if (values.size() >= 2) {
    double acc = 0.0;
    for (double v : values) acc += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(acc / static_cast<double>(values.size() - 1));
  }
  return r;
}

StepLossReport prediction_loss_per_step(const std::vector<Mat>& preds,
                                        const std::vector<Mat>& truths, double eps,
                                        const ot::SinkhornConfig& cfg) {
  if (preds.size() != truths.size())
    throw ShapeError("prediction_loss_per_step: " + std::to_string(preds.size()) +
                     " predictions vs " + std::to_string(truths.size()) + " targets");
  StepLossReport report;
  report.w_eps.reserve(preds.size());
  report.w_debiased.reserve(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].cols() != truths[i].cols())
      throw ShapeError("prediction_loss_per_step: dimension mismatch at step " +
                       std::to_string(i));
    ot::DiscreteMeasure p = ot::DiscreteMeasure::uniform(preds[i]);
    ot::DiscreteMeasure t = ot::DiscreteMeasure::uniform(truths[i]);
    ot::SinkhornResult raw = ot::sinkhorn(p, t, eps, cfg);
    report.w_eps.push_back(raw.value);
    report.converged.push_back(raw.converged);
    report.w_debiased.push_back(ot::sinkhorn_divergence(p, t, eps, cfg));
  }
  return report;
}

double hellinger(const ClassHistogram& a, const ClassHistogram& b) {
  check_histograms(a, b, /*need_mass=*/true);
  const double na = static_cast<double>(a.total);
  const double nb = static_cast<double>(b.total);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.counts.size(); ++i) {
    const double d = std::sqrt(static_cast<double>(a.counts[i]) / na) -
                     std::sqrt(static_cast<double>(b.counts[i]) / nb);
    acc += d * d;
  }
  return 0.5 * acc;
}

double l1_histogram(const ClassHistogram& a, const ClassHistogram& b) {
  check_histograms(a, b, /*need_mass=*/false);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.counts.size(); ++i)
    acc += std::abs(static_cast<double>(a.counts[i] - b.counts[i]));
  return acc;
}

std::vector<int> knn_classify(const Mat& train_points, const std::vector<int>& train_labels,
                              const Mat& queries, int k) {
  const Index n = train_points.rows();
  if (n == 0) throw DataError("knn_classify: empty training set");
  if (static_cast<Index>(train_labels.size()) != n)
    throw ShapeError("knn_classify: " + std::to_string(n) + " training points but " +
                     std::to_string(train_labels.size()) + " labels");
  if (queries.cols() != train_points.cols())
    throw ShapeError("knn_classify: query dimension " + std::to_string(queries.cols()) +
                     " != training dimension " + std::to_string(train_points.cols()));
  if (k < 1 || static_cast<Index>(k) > n)
    throw ConfigError("knn_classify: k = " + std::to_string(k) + " outside [1, " +
                      std::to_string(n) + "]");

  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(queries.rows()));
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index q = 0; q < queries.rows(); ++q) {
    Vec d2 = (train_points.rowwise() - queries.row(q)).rowwise().squaredNorm();
    std::iota(order.begin(), order.end(), Index{0});
    // Partial sort is enough for the k nearest; index order breaks exact ties.
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index i, Index j) {
      return d2(i) != d2(j) ? d2(i) < d2(j) : i < j;
    });
    int best_label = 0;
    long best_votes = -1;
    std::vector<std::pair<int, long>> votes;  // label -> count, few entries
    for (int h = 0; h < k; ++h) {
      const int lab = train_labels[static_cast<std::size_t>(order[static_cast<std::size_t>(h)])];
      auto it = std::find_if(votes.begin(), votes.end(),
                             [&](const auto& p) { return p.first == lab; });
      if (it == votes.end())
        votes.emplace_back(lab, 1);
      else
        ++it->second;
    }
    for (const auto& [lab, cnt] : votes)
      if (cnt > best_votes || (cnt == best_votes && lab < best_label)) {
        best_votes = cnt;
        best_label = lab;
      }
    out.push_back(best_label);
  }
  return out;
}

ClassHistogram class_histogram(const std::vector<int>& labels, int k_classes) {
  if (k_classes < 1) throw ConfigError("class_histogram: k_classes must be >= 1");
  ClassHistogram h;
  h.counts.assign(static_cast<std::size_t>(k_classes), 0);
  for (int lab : labels) {
    if (lab < 0 || lab >= k_classes)
      throw DataError("class_histogram: label " + std::to_string(lab) + " outside [0, " +
                      std::to_string(k_classes) + ")");
    ++h.counts[static_cast<std::size_t>(lab)];
  }
  h.total = static_cast<long>(labels.size());
  return h;
}

void write_metric_rows(std::ostream& os, const std::vector<MetricRow>& rows) {
  os << "metric,mode,step,value,seed\n";
  char buf[64];
  for (const MetricRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    os << r.metric << ',' << r.mode << ',' << r.step << ',' << buf << ',' << r.seed << '\n';
  }
}

}  // namespace popdyn::metrics
