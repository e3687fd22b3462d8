#include "multifuse/ablation.hpp"

#include "multifuse/pipelines.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>

namespace multifuse::eval {

using nlohmann::json;

AblationSuite AblationSuite::from_json(const json& j) {
  pipeline::require_known_keys(j, {"task", "folds", "dev_fraction", "rows"},
                               "ablation suite");
  AblationSuite suite;
  suite.task = j.value("task", suite.task);
  suite.folds = j.value("folds", suite.folds);
  suite.dev_fraction = j.value("dev_fraction", suite.dev_fraction);
  if (!j.contains("rows") || !j.at("rows").is_array()) {
    throw ConfigError("ablation suite: missing rows array");
  }
  for (const auto& row : j.at("rows")) {
    pipeline::require_known_keys(row, {"label", "model", "config", "cv"},
                                 "ablation row");
    AblationRow r;
    r.label = row.value("label", std::string{});
    r.model = row.value("model", std::string{});
    r.config = row.value("config", json::object());
    r.cross_validation = row.value("cv", false);
    if (r.label.empty() || r.model.empty()) {
      throw ConfigError("ablation row needs label and model");
    }
    suite.rows.push_back(std::move(r));
  }
  return suite;
}

AblationReport run_ablation(const AblationSuite& suite, const data::Dataset& ds,
                            std::uint64_t seed, int jobs) {
  AblationReport report;
  if (suite.rows.empty()) return report;

  auto [train_set, dev_set] =
      data::split_by_speaker(ds, suite.dev_fraction, seed);

  for (const auto& row : suite.rows) {
    AblationRowResult result;
    result.label = row.label;
    result.model = row.model;
    result.digest = pipeline::config_digest(row.config);
    try {
      const auto trainer =
          pipeline::make_fold_trainer(row.model, row.config, suite.task);
      if (row.cross_validation) {
        CvResult cv = run_cv(ds, suite.task, suite.folds, trainer, seed, jobs);
        result.metrics = cv.pooled;
        result.cv = std::move(cv);
      } else {
        Rng row_rng = Rng(seed).substream("ablation_row");
        const auto preds = trainer(train_set, dev_set, row_rng.seed());
        result.metrics = compute_metrics(preds, dev_set.labels(suite.task),
                                         ds.manifest.task(suite.task).num_classes());
      }
      result.ok = true;
    } catch (const std::exception& e) {
      result.ok = false;
      result.error = e.what();
    }
    report.rows.push_back(std::move(result));
  }
  return report;
}

std::string AblationReport::to_text() const {
  std::size_t label_width = 6;
  for (const auto& r : rows) label_width = std::max(label_width, r.label.size());

  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(label_width) + 2) << "Method"
     << std::right << std::setw(8) << "W_F1" << std::setw(8) << "U_F1"
     << std::setw(8) << "Acc" << "  " << std::left << "Digest\n";
  os << std::string(label_width + 2 + 24 + 2 + 16, '-') << "\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(label_width) + 2) << r.label;
    if (r.ok) {
      os << std::right << std::fixed << std::setprecision(4) << std::setw(8)
         << r.metrics.weighted_f1 << std::setw(8) << r.metrics.unweighted_f1
         << std::setw(8) << r.metrics.accuracy;
    } else {
      os << std::right << std::setw(8) << "FAIL" << std::setw(8) << "-"
         << std::setw(8) << "-";
    }
    os << "  " << r.digest;
    if (!r.ok) os << "  (" << r.error << ")";
    if (r.cv) {
      os << "  [" << r.cv->per_fold.size() << " folds, wf1 "
         << std::fixed << std::setprecision(4) << r.cv->mean_wf1 << " +- "
         << r.cv->std_wf1 << "]";
    }
    os << "\n";
  }
  return os.str();
}

std::string AblationReport::to_csv() const {
  std::ostringstream os;
  os << "label,model,digest,ok,weighted_f1,unweighted_f1,accuracy,error\n";
  for (const auto& r : rows) {
    std::string label = r.label;
    std::replace(label.begin(), label.end(), ',', ';');
    std::string error = r.error;
    std::replace(error.begin(), error.end(), ',', ';');
    os << label << "," << r.model << "," << r.digest << "," << (r.ok ? 1 : 0)
       << ",";
    if (r.ok) {
      os << r.metrics.weighted_f1 << "," << r.metrics.unweighted_f1 << ","
         << r.metrics.accuracy;
    } else {
      os << ",,";
    }
    os << "," << error << "\n";
  }
  return os.str();
}

}  // namespace multifuse::eval
