#pragma once
// Classification metrics and pose-accuracy AUC.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "corrprune/common.hpp"

namespace corrprune {

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double fscore = 0.0;
};

inline Prf prf_metrics(const std::vector<uint8_t>& pred,
                       const std::vector<uint8_t>& gt) {
  CP_CHECK(pred.size() == gt.size(), "prf_metrics: length mismatch");
  int64_t tp = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    tp += pred[i] && gt[i];
    fp += pred[i] && !gt[i];
    fn += !pred[i] && gt[i];
  }
  Prf r;
  r.precision = tp + fp > 0 ? double(tp) / double(tp + fp) : 0.0;
  r.recall = tp + fn > 0 ? double(tp) / double(tp + fn) : 0.0;
  r.fscore = r.precision + r.recall > 0
                 ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
                 : 0.0;
  return r;
}

// Area under the empirical cumulative recall curve over [0, t], normalized
// by t. The empirical curve is a step function, so the exact integral is a
// sum of rectangles between consecutive sorted errors.
inline std::map<int, double> pose_auc(
    std::vector<double> errors, const std::vector<int>& thresholds = {5, 10,
                                                                      20}) {
  CP_CHECK(!errors.empty(), "pose_auc: empty error list");
  CP_CHECK(!thresholds.empty(), "pose_auc: empty threshold list");
  for (double e : errors)
    CP_CHECK(std::isfinite(e) && e >= 0.0,
             "pose_auc: errors must be finite and nonnegative");
  std::sort(errors.begin(), errors.end());
  const double n = double(errors.size());
  std::map<int, double> out;
  for (int t : thresholds) {
    CP_CHECK(t > 0, "pose_auc: thresholds must be positive");
    double area = 0.0;
    double prev = 0.0;
    size_t i = 0;
    while (i < errors.size() && errors[i] <= double(t)) {
      area += (errors[i] - prev) * (double(i) / n);
      prev = errors[i];
      ++i;
    }
    area += (double(t) - prev) * (double(i) / n);
    out[t] = area / double(t);
  }
  return out;
}

struct PairMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double fscore = 0.0;
  double pose_err_deg = 180.0;  // max of rotation and translation error
  bool pose_ok = false;
};

struct MetricsReport {
  double precision = 0.0;
  double recall = 0.0;
  double fscore = 0.0;
  std::map<int, double> auc;  // threshold degrees -> [0,1]
  std::vector<PairMetrics> rows;
};

}  // namespace corrprune
