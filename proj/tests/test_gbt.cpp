#include <doctest.h>

#include "multifuse/gbt.hpp"
#include "multifuse/rng.hpp"

#include <array>
#include <cmath>
#include <filesystem>
#include <set>

using namespace multifuse;
using namespace multifuse::gbt;

namespace {

// Brute-force split oracle for 1-D data: enumerate every midpoint between
// consecutive sorted values, sum g/h directly in sorted order, apply the
// same gain formula and rejection rules.
struct OracleSplit {
  bool found = false;
  double threshold = 0.0;
  double gain = 0.0;
  double left_weight = 0.0;
  double right_weight = 0.0;
  double leaf_weight = 0.0;
};

OracleSplit oracle_best_split_1d(const Matrix& x, const Vector& g,
                                 const Vector& h, double lambda,
                                 double min_child_hessian) {
  const Index n = x.rows();
  std::vector<double> values;
  for (Index i = 0; i < n; ++i) values.push_back(x(i, 0));
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());

  // Every candidate is evaluated by a fresh direct scan over the points in
  // index order.
  auto side_sums = [&](double thr) {
    double gl = 0, hl = 0, gr = 0, hr = 0;
    for (Index i = 0; i < n; ++i) {
      if (x(i, 0) < thr) {
        gl += g(i);
        hl += h(i);
      } else {
        gr += g(i);
        hr += h(i);
      }
    }
    return std::array<double, 4>{gl, hl, gr, hr};
  };

  double g_sum = 0.0, h_sum = 0.0;
  for (Index i = 0; i < n; ++i) {
    g_sum += g(i);
    h_sum += h(i);
  }

  OracleSplit best;
  best.leaf_weight = -g_sum / (h_sum + lambda);
  auto score = [&](double gs, double hs) { return gs * gs / (hs + lambda); };
  for (std::size_t r = 0; r + 1 < values.size(); ++r) {
    const double thr = 0.5 * (values[r] + values[r + 1]);
    const auto [gl, hl, gr, hr] = side_sums(thr);
    if (hl < min_child_hessian || hr < min_child_hessian) continue;
    const double gain =
        0.5 * (score(gl, hl) + score(gr, hr) - score(g_sum, h_sum));
    if (gain <= 0.0) continue;
    if (!best.found || gain > best.gain) {
      best.found = true;
      best.gain = gain;
      best.threshold = thr;
      best.left_weight = -gl / (hl + lambda);
      best.right_weight = -gr / (hr + lambda);
    }
  }
  return best;
}

// Reference depth-1 full-batch booster used to cross-check the trainer on
// separable data.
double reference_stump_booster_accuracy(const Matrix& x,
                                        const std::vector<int>& y, int C,
                                        int rounds, double lr, double lambda) {
  Matrix logits = Matrix::Zero(x.rows(), C);
  GbtParams p;
  p.max_depth = 1;
  p.lambda = lambda;
  p.min_child_hessian = 0.0;
  p.subsample = 1.0;
  p.colsample_bytree = 1.0;
  for (int t = 0; t < rounds; ++t) {
    auto [g, h] = grad_hess_multiclass(logits, y, Vector());
    for (int c = 0; c < C; ++c) {
      Tree tree = fit_tree(x, g.col(c), h.col(c), p);
      for (Index i = 0; i < x.rows(); ++i) {
        logits(i, c) += lr * tree.predict(x.row(i).transpose());
      }
    }
  }
  int correct = 0;
  for (Index i = 0; i < x.rows(); ++i) {
    Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    correct += static_cast<int>(arg) == y[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(correct) / static_cast<double>(x.rows());
}

Matrix two_blob_features(int n_per_class, double gap, Rng& rng,
                         std::vector<int>* labels) {
  Matrix x(2 * n_per_class, 2);
  labels->clear();
  for (int i = 0; i < 2 * n_per_class; ++i) {
    const int c = i < n_per_class ? 0 : 1;
    labels->push_back(c);
    x(i, 0) = rng.normal() + (c == 0 ? -gap : gap);
    x(i, 1) = rng.normal();
  }
  return x;
}

}  // namespace

TEST_CASE("grad_hess hand oracle") {
  Matrix logits(1, 2);
  logits << 0.0, 0.0;
  auto [g, h] = grad_hess_multiclass(logits, {0}, Vector());
  CHECK(g(0, 0) == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(g(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(h(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(h(0, 1) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("grad vanishes at a perfect prediction") {
  Matrix logits(1, 2);
  logits << 30.0, -30.0;
  auto [g, h] = grad_hess_multiclass(logits, {0}, Vector());
  CHECK(std::abs(g(0, 0)) < 1e-12);
  CHECK(h(0, 0) < 1e-12);
}

TEST_CASE("grad and hess are linear in the sample weight") {
  Matrix logits(2, 3);
  logits << 0.3, -0.2, 1.0, -1.0, 0.5, 0.2;
  Vector w1 = Vector::Ones(2);
  Vector w2 = 2.0 * w1;
  auto [g1, h1] = grad_hess_multiclass(logits, {2, 1}, w1);
  auto [g2, h2] = grad_hess_multiclass(logits, {2, 1}, w2);
  CHECK((g2 - 2.0 * g1).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((h2 - 2.0 * h1).cwiseAbs().maxCoeff() < 1e-15);
  CHECK_THROWS_AS(grad_hess_multiclass(logits, {3, 1}, w1), DataError);
}

TEST_CASE("fit_tree two-point hand oracle") {
  Matrix x(2, 1);
  x << 0.0, 1.0;
  Vector g(2), h(2);
  g << -1.0, 1.0;
  h << 1.0, 1.0;
  GbtParams p;
  p.max_depth = 1;
  p.lambda = 1.0;
  p.min_child_hessian = 0.0;
  Tree tree = fit_tree(x, g, h, p);
  REQUIRE(tree.nodes.size() == 3);
  CHECK(tree.nodes[0].feature == 0);
  CHECK(tree.nodes[0].threshold == doctest::Approx(0.5));
  CHECK(tree.predict(x.row(0).transpose()) == doctest::Approx(0.5));
  CHECK(tree.predict(x.row(1).transpose()) == doctest::Approx(-0.5));
}

TEST_CASE("fit_tree matches the brute-force oracle on small 1-D data") {
  Rng rng(404);
  for (int trial = 0; trial < 200; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.uniform_int(7));
    Matrix x(n, 1);
    Vector g(n), h(n);
    for (Index i = 0; i < n; ++i) {
      // Coarse grid so duplicate values occur often.
      x(i, 0) = static_cast<double>(rng.uniform_int(5));
      g(i) = rng.normal();
      h(i) = 0.1 + rng.uniform();
    }
    GbtParams p;
    p.max_depth = 1;
    p.lambda = 1.0;
    p.min_child_hessian = 0.1;
    Tree tree = fit_tree(x, g, h, p);
    OracleSplit want = oracle_best_split_1d(x, g, h, p.lambda, p.min_child_hessian);
    if (!want.found) {
      REQUIRE(tree.nodes.size() == 1);
      CHECK(tree.nodes[0].weight == want.leaf_weight);
    } else {
      REQUIRE(tree.nodes.size() == 3);
      CHECK(tree.nodes[0].threshold == want.threshold);
      CHECK(tree.nodes[tree.nodes[0].left].weight == want.left_weight);
      CHECK(tree.nodes[tree.nodes[0].right].weight == want.right_weight);
    }
  }
}

TEST_CASE("degenerate inputs give a single leaf") {
  GbtParams p;
  p.min_child_hessian = 0.0;

  // Equal gradients: no split has positive gain.
  Matrix x(4, 1);
  x << 0, 1, 2, 3;
  Vector g = Vector::Constant(4, 2.0);
  Vector h = Vector::Ones(4);
  Tree tree = fit_tree(x, g, h, p);
  REQUIRE(tree.nodes.size() == 1);
  CHECK(tree.nodes[0].weight == doctest::Approx(-8.0 / 5.0));

  // Duplicate feature values everywhere: no valid threshold.
  Matrix xd = Matrix::Constant(5, 2, 3.0);
  Vector gd(5), hd(5);
  gd << 1, -1, 2, -2, 0.5;
  hd = Vector::Ones(5);
  Tree dup = fit_tree(xd, gd, hd, p);
  CHECK(dup.nodes.size() == 1);
}

TEST_CASE("stump leaf equals -G/(H+lambda) on weighted data") {
  Rng rng(7);
  Matrix x = Matrix::Constant(6, 1, 1.0);  // forces a single leaf
  Vector g(6), h(6);
  for (Index i = 0; i < 6; ++i) {
    g(i) = rng.normal() * 3.0;
    h(i) = rng.uniform() + 0.2;
  }
  GbtParams p;
  p.lambda = 1.7;
  Tree tree = fit_tree(x, g, h, p);
  REQUIRE(tree.nodes.size() == 1);
  CHECK(std::abs(tree.nodes[0].weight - (-g.sum() / (h.sum() + p.lambda))) <
        1e-12);
}

TEST_CASE("training reaches perfect accuracy on separable data") {
  Rng rng(11);
  std::vector<int> y;
  Matrix x = two_blob_features(20, 3.0, rng, &y);

  GbtParams p;
  p.rounds = 100;
  p.learning_rate = 0.3;
  p.subsample = 1.0;
  p.colsample_bytree = 1.0;
  p.min_child_hessian = 0.0;
  BoostedEnsemble model = train(x, y, Vector(), Matrix(0, 2), {}, 2, p);
  const auto preds = model.predict(x);
  int correct = 0;
  for (std::size_t i = 0; i < y.size(); ++i) correct += preds[i] == y[i];
  CHECK(correct == 40);

  // Independent reference: the brute-force depth-1 booster also separates it.
  CHECK(reference_stump_booster_accuracy(x, y, 2, 100, 0.3, 1.0) == 1.0);
}

TEST_CASE("zero learning rate freezes the dev loss and early-stops") {
  Rng rng(13);
  std::vector<int> y;
  Matrix x = two_blob_features(15, 2.0, rng, &y);
  std::vector<int> yd;
  Matrix xd = two_blob_features(5, 2.0, rng, &yd);

  GbtParams p;
  p.learning_rate = 0.0;
  p.rounds = 500;
  p.early_stopping_rounds = 25;
  TrainLog log;
  BoostedEnsemble model = train(x, y, Vector(), xd, yd, 2, p, &log);
  CHECK(model.best_round == 1);
  CHECK(static_cast<int>(log.dev_mlogloss.size()) <= 26);
  for (double v : log.dev_mlogloss) {
    CHECK(v == doctest::Approx(log.dev_mlogloss[0]).epsilon(1e-15));
  }
}

TEST_CASE("class weighting raises minority recall on imbalanced data") {
  Rng rng(17);
  // 90/10 imbalance with a weak signal.
  const int n0 = 90, n1 = 10;
  Matrix x(n0 + n1, 2);
  std::vector<int> y;
  for (int i = 0; i < n0 + n1; ++i) {
    const int c = i < n0 ? 0 : 1;
    y.push_back(c);
    x(i, 0) = rng.normal() + (c == 0 ? 0.0 : 1.2);
    x(i, 1) = rng.normal();
  }
  Vector weights(n0 + n1);
  for (int i = 0; i < n0 + n1; ++i) weights(i) = y[static_cast<std::size_t>(i)] == 1 ? 9.0 : 1.0;

  GbtParams p;
  p.rounds = 60;
  p.learning_rate = 0.1;
  p.subsample = 1.0;
  p.colsample_bytree = 1.0;
  auto recall1 = [&](const BoostedEnsemble& m) {
    const auto preds = m.predict(x);
    int tp = 0, fn = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] == 1) (preds[i] == 1 ? tp : fn)++;
    }
    return static_cast<double>(tp) / static_cast<double>(tp + fn);
  };
  BoostedEnsemble unweighted = train(x, y, Vector(), Matrix(0, 2), {}, 2, p);
  BoostedEnsemble weighted = train(x, y, weights, Matrix(0, 2), {}, 2, p);
  CHECK(recall1(weighted) >= recall1(unweighted));
}

TEST_CASE("predict_proba contract") {
  // Untrained ensemble with zero base scores: uniform rows.
  BoostedEnsemble empty;
  empty.num_classes = 3;
  Matrix x = Matrix::Random(4, 2);
  Matrix p = empty.predict_proba(x);
  CHECK((p.array() - 1.0 / 3.0).abs().maxCoeff() < 1e-12);

  Rng rng(19);
  std::vector<int> y;
  Matrix xt = two_blob_features(12, 2.0, rng, &y);
  GbtParams params;
  params.rounds = 30;
  BoostedEnsemble model = train(xt, y, Vector(), Matrix(0, 2), {}, 2, params);

  Matrix probs = model.predict_proba(xt);
  for (Index i = 0; i < probs.rows(); ++i) {
    CHECK(std::abs(probs.row(i).sum() - 1.0) < 1e-9);
  }

  // Independent tree-walk oracle for the argmax on random points.
  for (int trial = 0; trial < 100; ++trial) {
    Vector pt(2);
    pt << rng.normal() * 3, rng.normal() * 3;
    Vector logits = model.base_scores;
    for (int t = 0; t < model.best_round; ++t) {
      for (int c = 0; c < 2; ++c) {
        // Manual walk.
        const Tree& tree = model.rounds[static_cast<std::size_t>(t)][static_cast<std::size_t>(c)];
        int node = 0;
        while (!tree.nodes[static_cast<std::size_t>(node)].is_leaf()) {
          const auto& nd = tree.nodes[static_cast<std::size_t>(node)];
          node = pt(nd.feature) < nd.threshold ? nd.left : nd.right;
        }
        logits(c) += model.params.learning_rate *
                     tree.nodes[static_cast<std::size_t>(node)].weight;
      }
    }
    Index want = 0;
    logits.maxCoeff(&want);
    const auto got = model.predict(pt.transpose());
    CHECK(got[0] == static_cast<int>(want));
  }

  Matrix wrong = Matrix::Random(2, 1);
  CHECK_THROWS_AS(model.predict_proba(wrong), DimensionError);
}

TEST_CASE("train mlogloss is non-increasing without subsampling") {
  Rng rng(23);
  for (int ds = 0; ds < 5; ++ds) {
    const Index n = 30;
    Matrix x(n, 3);
    std::vector<int> y;
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < 3; ++j) x(i, j) = rng.normal();
      y.push_back(static_cast<int>(rng.uniform_int(3)));
    }
    GbtParams p;
    p.rounds = 50;
    p.subsample = 1.0;
    p.colsample_bytree = 1.0;
    p.learning_rate = 0.3;
    p.min_child_hessian = 0.0;
    TrainLog log;
    train(x, y, Vector(), Matrix(0, 3), {}, 3, p, &log);
    for (std::size_t t = 1; t < log.train_mlogloss.size(); ++t) {
      CHECK(log.train_mlogloss[t] <= log.train_mlogloss[t - 1] + 1e-12);
    }
  }
}

TEST_CASE("determinism and early-stopping bookkeeping") {
  Rng rng(29);
  std::vector<int> y, yd;
  Matrix x = two_blob_features(25, 1.0, rng, &y);
  Matrix xd = two_blob_features(8, 1.0, rng, &yd);

  GbtParams p;
  p.rounds = 120;
  p.seed = 42;
  TrainLog log1, log2;
  BoostedEnsemble a = train(x, y, Vector(), xd, yd, 2, p, &log1);
  BoostedEnsemble b = train(x, y, Vector(), xd, yd, 2, p, &log2);
  Matrix pa = a.predict_proba(xd);
  Matrix pb = b.predict_proba(xd);
  CHECK((pa - pb).cwiseAbs().maxCoeff() == 0.0);
  CHECK(log1.dev_mlogloss == log2.dev_mlogloss);

  CHECK(a.best_round <= static_cast<int>(a.rounds.size()));
  const double best = log1.dev_mlogloss[static_cast<std::size_t>(a.best_round - 1)];
  for (int t = 0; t < a.best_round - 1; ++t) {
    CHECK(best <= log1.dev_mlogloss[static_cast<std::size_t>(t)]);
  }
}

TEST_CASE("single-class training data is rejected") {
  Matrix x = Matrix::Random(10, 2);
  std::vector<int> y(10, 0);
  GbtParams p;
  CHECK_THROWS_AS(train(x, y, Vector(), Matrix(0, 2), {}, 2, p), TrainError);
}

TEST_CASE("model save/load round trip preserves predictions") {
  Rng rng(31);
  std::vector<int> y;
  Matrix x = two_blob_features(10, 1.5, rng, &y);
  GbtParams p;
  p.rounds = 25;
  p.seed = 5;
  BoostedEnsemble model = train(x, y, Vector(), Matrix(0, 2), {}, 2, p);

  auto dir = std::filesystem::temp_directory_path() / "multifuse_test_gbt";
  std::filesystem::create_directories(dir);
  save_model(model, dir / "model.json");
  BoostedEnsemble back = load_model(dir / "model.json");
  CHECK((model.predict_proba(x) - back.predict_proba(x)).cwiseAbs().maxCoeff() ==
        0.0);
  CHECK(back.best_round == model.best_round);
}
