#include "multifuse/gbt.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

namespace multifuse::gbt {

using nlohmann::json;

void GbtParams::validate() const {
  if (max_depth < 1) throw ConfigError("gbt: max_depth must be >= 1");
  if (subsample <= 0.0 || subsample > 1.0) {
    throw ConfigError("gbt: subsample must be in (0, 1]");
  }
  if (colsample_bytree <= 0.0 || colsample_bytree > 1.0) {
    throw ConfigError("gbt: colsample_bytree must be in (0, 1]");
  }
  if (rounds < 0) throw ConfigError("gbt: rounds must be >= 0");
  if (lambda < 0.0) throw ConfigError("gbt: lambda must be >= 0");
  if (learning_rate < 0.0) throw ConfigError("gbt: learning_rate must be >= 0");
}

double Tree::predict(const Eigen::Ref<const Vector>& x) const {
  int i = 0;
  while (!nodes[static_cast<std::size_t>(i)].is_leaf()) {
    const TreeNode& n = nodes[static_cast<std::size_t>(i)];
    i = x(n.feature) < n.threshold ? n.left : n.right;
  }
  return nodes[static_cast<std::size_t>(i)].weight;
}

namespace {

Matrix softmax_rows(const Eigen::Ref<const Matrix>& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    Vector e = (logits.row(i).array() - m).exp();
    p.row(i) = e.transpose() / e.sum();
  }
  return p;
}

struct SplitChoice {
  bool found = false;
  int feature = -1;
  double threshold = 0.0;
  double gain = 0.0;
};

double structure_score(double g, double h, double lambda) {
  return g * g / (h + lambda);
}

class TreeBuilder {
 public:
  TreeBuilder(const Eigen::Ref<const Matrix>& x, const std::vector<Index>& cols,
              const Vector& g, const Vector& h, const GbtParams& params)
      : x_(x), cols_(cols), g_(g), h_(h), params_(params) {}

  Tree build(std::vector<Index> rows) {
    Tree tree;
    grow(std::move(rows), 0, tree);
    return tree;
  }

 private:
  int grow(std::vector<Index> rows, int depth, Tree& tree) {
    double g_sum = 0.0, h_sum = 0.0;
    for (Index i : rows) {
      g_sum += g_(i);
      h_sum += h_(i);
    }

    SplitChoice best;
    if (depth < params_.max_depth && rows.size() > 1) {
      best = find_split(rows, g_sum, h_sum);
    }

    const int node_id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    if (!best.found) {
      tree.nodes[static_cast<std::size_t>(node_id)].weight =
          -g_sum / (h_sum + params_.lambda);
      return node_id;
    }

    std::vector<Index> left_rows, right_rows;
    for (Index i : rows) {
      (x_(i, best.feature) < best.threshold ? left_rows : right_rows)
          .push_back(i);
    }
    rows.clear();
    rows.shrink_to_fit();

    tree.nodes[static_cast<std::size_t>(node_id)].feature = best.feature;
    tree.nodes[static_cast<std::size_t>(node_id)].threshold = best.threshold;
    const int left = grow(std::move(left_rows), depth + 1, tree);
    tree.nodes[static_cast<std::size_t>(node_id)].left = left;
    const int right = grow(std::move(right_rows), depth + 1, tree);
    tree.nodes[static_cast<std::size_t>(node_id)].right = right;
    return node_id;
  }

  SplitChoice find_split(const std::vector<Index>& rows, double g_sum,
                         double h_sum) const {
    SplitChoice best;
    const double parent = structure_score(g_sum, h_sum, params_.lambda);
    std::vector<std::pair<double, Index>> order(rows.size());
    for (Index feature : cols_) {
      for (std::size_t r = 0; r < rows.size(); ++r) {
        order[r] = {x_(rows[r], feature), rows[r]};
      }
      std::sort(order.begin(), order.end());

      double gl = 0.0, hl = 0.0;
      for (std::size_t r = 0; r + 1 < order.size(); ++r) {
        gl += g_(order[r].second);
        hl += h_(order[r].second);
        if (order[r].first == order[r + 1].first) continue;
        const double hr = h_sum - hl;
        if (hl < params_.min_child_hessian || hr < params_.min_child_hessian) {
          continue;
        }
        const double gr = g_sum - gl;
        const double gain = 0.5 * (structure_score(gl, hl, params_.lambda) +
                                   structure_score(gr, hr, params_.lambda) -
                                   parent);
        if (gain <= 0.0) continue;
        const double threshold = 0.5 * (order[r].first + order[r + 1].first);
        const int fidx = static_cast<int>(feature);
        const bool better =
            gain > best.gain ||
            (gain == best.gain &&
             (fidx < best.feature ||
              (fidx == best.feature && threshold < best.threshold)));
        if (!best.found || better) {
          best.found = true;
          best.feature = fidx;
          best.threshold = threshold;
          best.gain = gain;
        }
      }
    }
    return best;
  }

  const Eigen::Ref<const Matrix>& x_;
  const std::vector<Index>& cols_;
  const Vector& g_;
  const Vector& h_;
  const GbtParams& params_;
};

std::vector<Index> all_indices(Index n) {
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  return idx;
}

}  // namespace

std::pair<Matrix, Matrix> grad_hess_multiclass(
    const Eigen::Ref<const Matrix>& logits, const std::vector<int>& labels,
    const Vector& sample_weights) {
  const Index n = logits.rows();
  const Index c = logits.cols();
  if (static_cast<Index>(labels.size()) != n) {
    throw DimensionError("grad_hess: labels length mismatch");
  }
  if (!logits.allFinite()) throw TrainError("grad_hess: non-finite logits");

  Matrix p = softmax_rows(logits);
  Matrix g = p;
  Matrix h(n, c);
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) {
      throw DataError("grad_hess: label " + std::to_string(y) +
                      " out of range for " + std::to_string(c) + " classes");
    }
    const double w = sample_weights.size() > 0 ? sample_weights(i) : 1.0;
    if (w < 0.0) throw ConfigError("grad_hess: negative sample weight");
    g(i, y) -= 1.0;
    for (Index k = 0; k < c; ++k) {
      h(i, k) = w * p(i, k) * (1.0 - p(i, k));
      g(i, k) *= w;
    }
  }
  return {std::move(g), std::move(h)};
}

Tree fit_tree(const Eigen::Ref<const Matrix>& x, const Vector& g,
              const Vector& h, const GbtParams& params) {
  return fit_tree_subset(x, all_indices(x.rows()), all_indices(x.cols()), g, h,
                         params);
}

Tree fit_tree_subset(const Eigen::Ref<const Matrix>& x,
                     const std::vector<Index>& row_idx,
                     const std::vector<Index>& col_idx, const Vector& g,
                     const Vector& h, const GbtParams& params) {
  params.validate();
  if (g.size() != x.rows() || h.size() != x.rows()) {
    throw DimensionError("fit_tree: g/h length mismatch");
  }
  if ((h.array() < 0.0).any()) throw DataError("fit_tree: negative hessian");
  TreeBuilder builder(x, col_idx, g, h, params);
  return builder.build(row_idx);
}

double multiclass_logloss(const Eigen::Ref<const Matrix>& logits,
                          const std::vector<int>& labels) {
  const Matrix p = softmax_rows(logits);
  double loss = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    loss -= std::log(std::max(p(i, labels[static_cast<std::size_t>(i)]), 1e-15));
  }
  return loss / static_cast<double>(logits.rows());
}

Matrix BoostedEnsemble::predict_raw(const Eigen::Ref<const Matrix>& x) const {
  Matrix logits(x.rows(), num_classes);
  if (base_scores.size() > 0) {
    logits.rowwise() = base_scores.transpose();
  } else {
    logits.setZero();
  }
  const int used = std::min<int>(best_round, static_cast<int>(rounds.size()));
  for (Index i = 0; i < x.rows(); ++i) {
    for (int t = 0; t < used; ++t) {
      for (int c = 0; c < num_classes; ++c) {
        logits(i, c) += params.learning_rate *
                        rounds[static_cast<std::size_t>(t)]
                              [static_cast<std::size_t>(c)]
                                  .predict(x.row(i).transpose());
      }
    }
  }
  return logits;
}

Matrix BoostedEnsemble::predict_proba(const Eigen::Ref<const Matrix>& x) const {
  if (num_classes < 2) throw ConfigError("predict_proba: untrained ensemble");
  if (!rounds.empty()) {
    // Feature count check against any tree that actually splits.
    for (const auto& per_class : rounds) {
      for (const auto& tree : per_class) {
        for (const auto& node : tree.nodes) {
          if (!node.is_leaf() && node.feature >= x.cols()) {
            throw DimensionError("predict_proba: input has fewer features than "
                                 "the model was trained on");
          }
        }
      }
    }
  }
  return softmax_rows(predict_raw(x));
}

std::vector<int> BoostedEnsemble::predict(const Eigen::Ref<const Matrix>& x) const {
  const Matrix p = predict_proba(x);
  std::vector<int> out(static_cast<std::size_t>(x.rows()));
  for (Index i = 0; i < p.rows(); ++i) {
    Index arg = 0;
    p.row(i).maxCoeff(&arg);
    out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return out;
}

BoostedEnsemble train(const Eigen::Ref<const Matrix>& x_train,
                      const std::vector<int>& y_train,
                      const Vector& sample_weights,
                      const Eigen::Ref<const Matrix>& x_dev,
                      const std::vector<int>& y_dev, int num_classes,
                      const GbtParams& params, TrainLog* log) {
  params.validate();
  const Index n = x_train.rows();
  const Index d = x_train.cols();
  if (static_cast<Index>(y_train.size()) != n) {
    throw DimensionError("gbt train: labels length mismatch");
  }
  if (x_dev.rows() > 0 && x_dev.cols() != d) {
    throw DimensionError("gbt train: dev feature dim mismatch");
  }
  if (sample_weights.size() > 0 && sample_weights.size() != n) {
    throw DimensionError("gbt train: sample_weights length mismatch");
  }
  std::set<int> distinct(y_train.begin(), y_train.end());
  if (distinct.size() < 2) {
    throw TrainError("gbt train: training data contains a single class");
  }
  for (int y : y_train) {
    if (y < 0 || y >= num_classes) {
      throw DataError("gbt train: label out of range");
    }
  }

  BoostedEnsemble model;
  model.params = params;
  model.num_classes = num_classes;

  // Log class priors as base score; uniform data reduces to zero offsets.
  Vector priors = Vector::Zero(num_classes);
  for (int y : y_train) priors(y) += 1.0;
  priors /= static_cast<double>(n);
  model.base_scores = priors.array().max(1e-12).log();

  Matrix logits(n, num_classes);
  logits.rowwise() = model.base_scores.transpose();
  Matrix dev_logits(x_dev.rows(), num_classes);
  dev_logits.rowwise() = model.base_scores.transpose();

  Rng rng = Rng(params.seed).substream("gbt");
  const bool use_dev = x_dev.rows() > 0;
  double best_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;

  const auto n_sub =
      std::max<Index>(1, static_cast<Index>(std::floor(params.subsample *
                                                       static_cast<double>(n))));
  const auto d_sub = std::max<Index>(
      1, static_cast<Index>(
             std::floor(params.colsample_bytree * static_cast<double>(d))));

  for (int t = 0; t < params.rounds; ++t) {
    auto [g, h] = grad_hess_multiclass(logits, y_train, sample_weights);

    std::vector<Tree> round_trees;
    round_trees.reserve(static_cast<std::size_t>(num_classes));
    for (int c = 0; c < num_classes; ++c) {
      const std::vector<Index> rows =
          n_sub < n ? rng.sample_indices(n, n_sub) : all_indices(n);
      const std::vector<Index> cols =
          d_sub < d ? rng.sample_indices(d, d_sub) : all_indices(d);
      round_trees.push_back(
          fit_tree_subset(x_train, rows, cols, g.col(c), h.col(c), params));
    }

    // One gradient snapshot per round; logits move after all class trees.
    for (int c = 0; c < num_classes; ++c) {
      const Tree& tree = round_trees[static_cast<std::size_t>(c)];
      for (Index i = 0; i < n; ++i) {
        logits(i, c) += params.learning_rate * tree.predict(x_train.row(i).transpose());
      }
      for (Index i = 0; i < x_dev.rows(); ++i) {
        dev_logits(i, c) +=
            params.learning_rate * tree.predict(x_dev.row(i).transpose());
      }
    }
    model.rounds.push_back(std::move(round_trees));

    const double train_loss = multiclass_logloss(logits, y_train);
    if (!std::isfinite(train_loss)) {
      throw TrainError("gbt train: non-finite loss at round " +
                       std::to_string(t + 1));
    }
    if (log) log->train_mlogloss.push_back(train_loss);

    if (use_dev) {
      const double dev_loss = multiclass_logloss(dev_logits, y_dev);
      if (log) log->dev_mlogloss.push_back(dev_loss);
      if (dev_loss < best_loss) {
        best_loss = dev_loss;
        model.best_round = t + 1;
        since_best = 0;
      } else if (++since_best >= params.early_stopping_rounds) {
        break;
      }
    } else {
      model.best_round = t + 1;
    }
  }
  if (model.best_round == 0) model.best_round = static_cast<int>(model.rounds.size());
  return model;
}

namespace {

json tree_to_json(const Tree& tree, int node_id) {
  const TreeNode& n = tree.nodes[static_cast<std::size_t>(node_id)];
  if (n.is_leaf()) return json{{"weight", n.weight}};
  return json{{"feature", n.feature},
              {"threshold", n.threshold},
              {"left", tree_to_json(tree, n.left)},
              {"right", tree_to_json(tree, n.right)}};
}

int tree_from_json(const json& j, Tree& tree) {
  const int node_id = static_cast<int>(tree.nodes.size());
  tree.nodes.emplace_back();
  if (j.contains("weight")) {
    tree.nodes[static_cast<std::size_t>(node_id)].weight =
        j.at("weight").get<double>();
    return node_id;
  }
  tree.nodes[static_cast<std::size_t>(node_id)].feature =
      j.at("feature").get<int>();
  tree.nodes[static_cast<std::size_t>(node_id)].threshold =
      j.at("threshold").get<double>();
  const int left = tree_from_json(j.at("left"), tree);
  tree.nodes[static_cast<std::size_t>(node_id)].left = left;
  const int right = tree_from_json(j.at("right"), tree);
  tree.nodes[static_cast<std::size_t>(node_id)].right = right;
  return node_id;
}

}  // namespace

void save_model(const BoostedEnsemble& model, const std::filesystem::path& path) {
  json j;
  j["params"] = {{"max_depth", model.params.max_depth},
                 {"learning_rate", model.params.learning_rate},
                 {"subsample", model.params.subsample},
                 {"colsample_bytree", model.params.colsample_bytree},
                 {"rounds", model.params.rounds},
                 {"early_stopping_rounds", model.params.early_stopping_rounds},
                 {"lambda", model.params.lambda},
                 {"min_child_hessian", model.params.min_child_hessian},
                 {"seed", model.params.seed}};
  j["num_classes"] = model.num_classes;
  j["best_round"] = model.best_round;
  j["base_scores"] = std::vector<double>(
      model.base_scores.data(), model.base_scores.data() + model.base_scores.size());
  json rounds = json::array();
  for (const auto& per_class : model.rounds) {
    json round = json::array();
    for (const auto& tree : per_class) round.push_back(tree_to_json(tree, 0));
    rounds.push_back(std::move(round));
  }
  j["trees"] = std::move(rounds);

  std::ofstream os(path);
  if (!os) throw IoError("cannot write model: " + path.string());
  os << j.dump(2) << "\n";
}

BoostedEnsemble load_model(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read model: " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw IoError("model parse error: " + std::string(e.what()));
  }

  BoostedEnsemble model;
  const json& p = j.at("params");
  model.params.max_depth = p.at("max_depth").get<int>();
  model.params.learning_rate = p.at("learning_rate").get<double>();
  model.params.subsample = p.at("subsample").get<double>();
  model.params.colsample_bytree = p.at("colsample_bytree").get<double>();
  model.params.rounds = p.at("rounds").get<int>();
  model.params.early_stopping_rounds = p.at("early_stopping_rounds").get<int>();
  model.params.lambda = p.at("lambda").get<double>();
  model.params.min_child_hessian = p.at("min_child_hessian").get<double>();
  model.params.seed = p.at("seed").get<std::uint64_t>();
  model.num_classes = j.at("num_classes").get<int>();
  model.best_round = j.at("best_round").get<int>();
  const auto base = j.at("base_scores").get<std::vector<double>>();
  model.base_scores =
      Eigen::Map<const Vector>(base.data(), static_cast<Index>(base.size()));
  for (const auto& round : j.at("trees")) {
    std::vector<Tree> per_class;
    for (const auto& tj : round) {
      Tree tree;
      tree_from_json(tj, tree);
      per_class.push_back(std::move(tree));
    }
    model.rounds.push_back(std::move(per_class));
  }
  return model;
}

}  // namespace multifuse::gbt
