#pragma once

#include "multifuse/common.hpp"
#include "multifuse/rng.hpp"

#include <filesystem>
#include <utility>
#include <vector>

namespace multifuse::gbt {

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double weight = 0.0;

  bool is_leaf() const { return feature < 0; }
};

struct Tree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  double predict(const Eigen::Ref<const Vector>& x) const;
};

struct GbtParams {
  int max_depth = 3;
  double learning_rate = 0.05;  // selected from {0.01, 0.05} by dev mlogloss
  double subsample = 0.8;
  double colsample_bytree = 0.8;
  int rounds = 500;
  int early_stopping_rounds = 25;
  double lambda = 1.0;  // L2 on leaf weights
  double min_child_hessian = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Additive model: logits(x) = base_scores + lr * sum over used rounds of the
// per-class trees. Prediction truncates at best_round (early stopping).
struct BoostedEnsemble {
  GbtParams params;
  int num_classes = 0;
  Vector base_scores;                      // zero when untrained
  std::vector<std::vector<Tree>> rounds;   // rounds[t][c]
  int best_round = 0;

  Matrix predict_raw(const Eigen::Ref<const Matrix>& x) const;
  Matrix predict_proba(const Eigen::Ref<const Matrix>& x) const;
  std::vector<int> predict(const Eigen::Ref<const Matrix>& x) const;
};

struct TrainLog {
  std::vector<double> train_mlogloss;
  std::vector<double> dev_mlogloss;
};

// Second-order multiclass log-loss statistics at the current logits:
// g = w*(softmax - onehot), h = w*p*(1-p), both n x C.
std::pair<Matrix, Matrix> grad_hess_multiclass(
    const Eigen::Ref<const Matrix>& logits, const std::vector<int>& labels,
    const Vector& sample_weights);

// Exact greedy tree over sorted unique values with midpoint thresholds.
// Split gain: 0.5*(GL^2/(HL+l) + GR^2/(HR+l) - (GL+GR)^2/(HL+HR+l)); splits
// with gain <= 0 or a child hessian below min_child_hessian are rejected;
// leaf weight is -G/(H+l). Ties break on lowest feature then lowest
// threshold.
Tree fit_tree(const Eigen::Ref<const Matrix>& x, const Vector& g,
              const Vector& h, const GbtParams& params);

// Subset variant used by the booster (row/column subsampling).
Tree fit_tree_subset(const Eigen::Ref<const Matrix>& x,
                     const std::vector<Index>& row_idx,
                     const std::vector<Index>& col_idx, const Vector& g,
                     const Vector& h, const GbtParams& params);

double multiclass_logloss(const Eigen::Ref<const Matrix>& logits,
                          const std::vector<int>& labels);

// Boosting with optional dev-set early stopping (empty dev disables it).
// sample_weights scales g and h per row; pass Vector() for unweighted.
BoostedEnsemble train(const Eigen::Ref<const Matrix>& x_train,
                      const std::vector<int>& y_train,
                      const Vector& sample_weights,
                      const Eigen::Ref<const Matrix>& x_dev,
                      const std::vector<int>& y_dev, int num_classes,
                      const GbtParams& params, TrainLog* log = nullptr);

void save_model(const BoostedEnsemble& model, const std::filesystem::path& path);
BoostedEnsemble load_model(const std::filesystem::path& path);

}  // namespace multifuse::gbt
