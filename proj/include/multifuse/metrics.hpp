#pragma once

#include "multifuse/common.hpp"

#include <string>
#include <vector>

namespace multifuse::eval {

// Confusion rows are true classes, columns predictions. Unweighted F1 is the
// macro mean over all task classes (absent classes count as 0); weighted F1
// is the support-weighted mean, so absent classes drop out of it.
struct Metrics {
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> confusion;
  double weighted_f1 = 0.0;
  double unweighted_f1 = 0.0;
  double accuracy = 0.0;
  std::vector<double> precision;
  std::vector<double> recall;
  std::vector<double> f1;
  std::int64_t unparsed = 0;  // LLM answers that missed every option

  std::int64_t total() const { return confusion.sum(); }
  std::string confusion_csv() const;
};

Metrics compute_metrics(const std::vector<int>& preds,
                        const std::vector<int>& labels, int num_classes);

}  // namespace multifuse::eval
