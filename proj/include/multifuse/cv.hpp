#pragma once

#include "multifuse/dataset.hpp"
#include "multifuse/metrics.hpp"

#include <functional>

namespace multifuse::eval {

// Trains on the fold's train split, returns predictions for the dev split in
// dev sample order.
using FoldTrainer = std::function<std::vector<int>(
    const data::Dataset& train, const data::Dataset& dev, std::uint64_t seed)>;

struct CvResult {
  Metrics pooled;  // micro: all dev predictions pooled across folds
  std::vector<Metrics> per_fold;
  double mean_wf1 = 0.0, std_wf1 = 0.0;
  double mean_uf1 = 0.0, std_uf1 = 0.0;
  double mean_acc = 0.0, std_acc = 0.0;
};

// Speaker-independent k-fold; every fold trains with the same trainer and
// per-fold substream seeds. jobs > 1 runs folds on worker threads (results
// are merged in fold order, so the output is identical either way).
CvResult run_cv(const data::Dataset& ds, const std::string& task, int k,
                const FoldTrainer& trainer, std::uint64_t seed, int jobs = 1);

}  // namespace multifuse::eval
