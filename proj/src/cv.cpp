#include "multifuse/cv.hpp"

#include <cmath>
#include <set>
#include <thread>

namespace multifuse::eval {

namespace {

void mean_std(const std::vector<double>& xs, double* mean, double* sd) {
  const double n = static_cast<double>(xs.size());
  double m = 0.0;
  for (double x : xs) m += x;
  m /= n;
  double var = 0.0;
  for (double x : xs) var += (x - m) * (x - m);
  *mean = m;
  *sd = xs.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
}

}  // namespace

CvResult run_cv(const data::Dataset& ds, const std::string& task, int k,
                const FoldTrainer& trainer, std::uint64_t seed, int jobs) {
  const int num_classes = ds.manifest.task(task).num_classes();
  auto folds = data::kfold_by_speaker(ds, k, seed);

  struct FoldOutput {
    std::vector<int> preds;
    std::vector<int> labels;
    std::string error;
  };
  std::vector<FoldOutput> outputs(folds.size());

  auto run_fold = [&](std::size_t f) {
    const auto& [train_set, dev_set] = folds[f];
    // Leakage guard, asserted on every fold.
    std::set<std::string> train_speakers;
    for (const auto& s : train_set.samples) train_speakers.insert(s.speaker_id);
    for (const auto& s : dev_set.samples) {
      if (train_speakers.count(s.speaker_id)) {
        outputs[f].error = "speaker leak in fold " + std::to_string(f);
        return;
      }
    }
    try {
      Rng fold_rng = Rng(seed).substream("fold" + std::to_string(f));
      outputs[f].preds = trainer(train_set, dev_set, fold_rng.seed());
      outputs[f].labels = dev_set.labels(task);
      if (outputs[f].preds.size() != outputs[f].labels.size()) {
        outputs[f].error = "trainer returned " +
                           std::to_string(outputs[f].preds.size()) +
                           " predictions for " +
                           std::to_string(outputs[f].labels.size()) +
                           " dev samples in fold " + std::to_string(f);
      }
    } catch (const std::exception& e) {
      outputs[f].error = "fold " + std::to_string(f) + ": " + e.what();
    }
  };

  if (jobs <= 1) {
    for (std::size_t f = 0; f < folds.size(); ++f) run_fold(f);
  } else {
    std::vector<std::thread> workers;
    const std::size_t width =
        std::min<std::size_t>(static_cast<std::size_t>(jobs), folds.size());
    for (std::size_t w = 0; w < width; ++w) {
      workers.emplace_back([&, w]() {
        for (std::size_t f = w; f < folds.size(); f += width) run_fold(f);
      });
    }
    for (auto& t : workers) t.join();
  }

  for (const auto& out : outputs) {
    if (!out.error.empty()) throw TrainError("run_cv: " + out.error);
  }

  CvResult result;
  std::vector<int> pooled_preds, pooled_labels;
  std::vector<double> wf1s, uf1s, accs;
  for (const auto& out : outputs) {
    pooled_preds.insert(pooled_preds.end(), out.preds.begin(), out.preds.end());
    pooled_labels.insert(pooled_labels.end(), out.labels.begin(), out.labels.end());
    Metrics fold_metrics = compute_metrics(out.preds, out.labels, num_classes);
    wf1s.push_back(fold_metrics.weighted_f1);
    uf1s.push_back(fold_metrics.unweighted_f1);
    accs.push_back(fold_metrics.accuracy);
    result.per_fold.push_back(std::move(fold_metrics));
  }
  result.pooled = compute_metrics(pooled_preds, pooled_labels, num_classes);
  mean_std(wf1s, &result.mean_wf1, &result.std_wf1);
  mean_std(uf1s, &result.mean_uf1, &result.std_uf1);
  mean_std(accs, &result.mean_acc, &result.std_acc);
  return result;
}

}  // namespace multifuse::eval
