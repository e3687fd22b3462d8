#include "multifuse/metrics.hpp"

#include <sstream>

namespace multifuse::eval {

Metrics compute_metrics(const std::vector<int>& preds,
                        const std::vector<int>& labels, int num_classes) {
  if (preds.size() != labels.size()) {
    throw DimensionError("compute_metrics: preds and labels differ in length");
  }
  if (preds.empty()) throw DataError("compute_metrics: empty input");
  if (num_classes < 1) throw ConfigError("compute_metrics: num_classes < 1");

  Metrics m;
  m.confusion.setZero(num_classes, num_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int y = labels[i];
    const int p = preds[i];
    if (y < 0 || y >= num_classes || p < 0 || p >= num_classes) {
      throw DataError("compute_metrics: class index out of range");
    }
    m.confusion(y, p) += 1;
  }

  const auto n = static_cast<double>(preds.size());
  m.precision.assign(static_cast<std::size_t>(num_classes), 0.0);
  m.recall.assign(static_cast<std::size_t>(num_classes), 0.0);
  m.f1.assign(static_cast<std::size_t>(num_classes), 0.0);

  double weighted = 0.0;
  double macro = 0.0;
  double trace = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    const double tp = static_cast<double>(m.confusion(c, c));
    const double support = static_cast<double>(m.confusion.row(c).sum());
    const double predicted = static_cast<double>(m.confusion.col(c).sum());
    const double precision = predicted > 0.0 ? tp / predicted : 0.0;
    const double recall = support > 0.0 ? tp / support : 0.0;
    const double f1 =
        precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall)
                                 : 0.0;
    m.precision[static_cast<std::size_t>(c)] = precision;
    m.recall[static_cast<std::size_t>(c)] = recall;
    m.f1[static_cast<std::size_t>(c)] = f1;
    weighted += support / n * f1;
    macro += f1;
    trace += tp;
  }
  m.weighted_f1 = weighted;
  m.unweighted_f1 = macro / static_cast<double>(num_classes);
  m.accuracy = trace / n;
  return m;
}

std::string Metrics::confusion_csv() const {
  std::ostringstream os;
  for (Index i = 0; i < confusion.rows(); ++i) {
    for (Index j = 0; j < confusion.cols(); ++j) {
      if (j) os << ",";
      os << confusion(i, j);
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace multifuse::eval
