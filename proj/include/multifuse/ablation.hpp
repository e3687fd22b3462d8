#pragma once

#include "multifuse/cv.hpp"
#include "multifuse/dataset.hpp"
#include "multifuse/metrics.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace multifuse::eval {

// One suite row: a method label plus a config delta for one model family.
struct AblationRow {
  std::string label;
  std::string model;  // gbt | fusenet | llm-toy
  nlohmann::json config;
  bool cross_validation = false;
};

struct AblationSuite {
  std::string task = "binary";
  int folds = 10;           // for rows with cross_validation
  double dev_fraction = 0.1;
  std::vector<AblationRow> rows;

  static AblationSuite from_json(const nlohmann::json& j);
};

struct AblationRowResult {
  std::string label;
  std::string model;
  std::string digest;
  bool ok = false;
  std::string error;
  Metrics metrics;
  std::optional<CvResult> cv;
};

struct AblationReport {
  std::vector<AblationRowResult> rows;

  std::string to_text() const;  // aligned columns
  std::string to_csv() const;
};

// Every row runs against the same split (and the same folds for CV rows)
// with a shared seed; a failing row is recorded and the suite continues.
AblationReport run_ablation(const AblationSuite& suite, const data::Dataset& ds,
                            std::uint64_t seed, int jobs = 1);

}  // namespace multifuse::eval
