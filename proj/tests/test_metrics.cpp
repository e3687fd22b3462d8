#include <doctest.h>

#include "multifuse/metrics.hpp"
#include "multifuse/rng.hpp"

#include <algorithm>
#include <numeric>

using namespace multifuse;
using namespace multifuse::eval;

namespace {

// Brute-force recount oracle: per-class tallies by direct scan.
Metrics recount_oracle(const std::vector<int>& preds,
                       const std::vector<int>& labels, int C) {
  Metrics m;
  m.confusion.setZero(C, C);
  double correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    m.confusion(labels[i], preds[i])++;
    correct += preds[i] == labels[i];
  }
  double wsum = 0, msum = 0;
  for (int c = 0; c < C; ++c) {
    double tp = 0, fp = 0, fn = 0, support = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (labels[i] == c) {
        support++;
        if (preds[i] == c) tp++;
        else fn++;
      } else if (preds[i] == c) {
        fp++;
      }
    }
    const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    const double f1 = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    wsum += support / static_cast<double>(preds.size()) * f1;
    msum += f1;
  }
  m.weighted_f1 = wsum;
  m.unweighted_f1 = msum / C;
  m.accuracy = correct / static_cast<double>(preds.size());
  return m;
}

}  // namespace

TEST_CASE("perfect predictions") {
  std::vector<int> labels = {0, 1, 2, 1, 0};
  Metrics m = compute_metrics(labels, labels, 3);
  CHECK(m.weighted_f1 == doctest::Approx(1.0));
  CHECK(m.unweighted_f1 == doctest::Approx(1.0));
  CHECK(m.accuracy == doctest::Approx(1.0));
  CHECK(m.total() == 5);
}

TEST_CASE("all-majority predictor on the elderly binary distribution") {
  // 258 normals, 79 depressed, everything predicted class 0. Hand oracle:
  // F1_0 = 2*258/(258+337), F1_1 = 0.
  std::vector<int> labels;
  labels.insert(labels.end(), 258, 0);
  labels.insert(labels.end(), 79, 1);
  std::vector<int> preds(labels.size(), 0);
  Metrics m = compute_metrics(preds, labels, 2);
  const double f1_0 = 2.0 * 258.0 / (258.0 + 337.0);
  CHECK(m.f1[0] == doctest::Approx(f1_0).epsilon(1e-12));
  CHECK(m.f1[1] == 0.0);
  CHECK(m.weighted_f1 == doctest::Approx(0.6640).epsilon(1e-4));
  CHECK(m.unweighted_f1 == doctest::Approx(0.4337).epsilon(1e-4));
  CHECK(m.accuracy == doctest::Approx(258.0 / 337.0));
  CHECK(m.confusion(0, 0) == 258);
  CHECK(m.confusion(1, 0) == 79);
}

TEST_CASE("single present class convention") {
  std::vector<int> labels(10, 0), preds(10, 0);
  Metrics m = compute_metrics(preds, labels, 2);
  CHECK(m.weighted_f1 == doctest::Approx(1.0));
  CHECK(m.unweighted_f1 == doctest::Approx(0.5));
}

TEST_CASE("metrics match the recount oracle on random vectors") {
  Rng rng(71);
  for (int trial = 0; trial < 100; ++trial) {
    const int C = 2 + static_cast<int>(rng.uniform_int(4));
    const int n = 5 + static_cast<int>(rng.uniform_int(60));
    std::vector<int> labels(static_cast<std::size_t>(n)), preds(static_cast<std::size_t>(n));
    for (auto& y : labels) y = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(C)));
    for (auto& p : preds) p = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(C)));
    Metrics got = compute_metrics(preds, labels, C);
    Metrics want = recount_oracle(preds, labels, C);
    CHECK(got.weighted_f1 == doctest::Approx(want.weighted_f1).epsilon(1e-12));
    CHECK(got.unweighted_f1 == doctest::Approx(want.unweighted_f1).epsilon(1e-12));
    CHECK(got.accuracy == doctest::Approx(want.accuracy).epsilon(1e-12));
    CHECK(got.confusion == want.confusion);
  }
}

TEST_CASE("permutation invariance and row sums") {
  Rng rng(72);
  std::vector<int> labels = {0, 1, 1, 2, 0, 2, 1};
  std::vector<int> preds = {0, 1, 2, 2, 1, 0, 1};
  Metrics base = compute_metrics(preds, labels, 3);

  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0u);
  rng.shuffle(order);
  std::vector<int> labels2, preds2;
  for (auto i : order) {
    labels2.push_back(labels[i]);
    preds2.push_back(preds[i]);
  }
  Metrics perm = compute_metrics(preds2, labels2, 3);
  CHECK(base.weighted_f1 == perm.weighted_f1);
  CHECK(base.unweighted_f1 == perm.unweighted_f1);
  CHECK(base.confusion == perm.confusion);

  // Row sums = supports.
  for (int c = 0; c < 3; ++c) {
    CHECK(base.confusion.row(c).sum() ==
          std::count(labels.begin(), labels.end(), c));
  }
}

TEST_CASE("weighted equals unweighted for equal supports") {
  std::vector<int> labels = {0, 0, 1, 1, 2, 2};
  std::vector<int> preds = {0, 1, 1, 2, 2, 0};
  Metrics m = compute_metrics(preds, labels, 3);
  CHECK(std::abs(m.weighted_f1 - m.unweighted_f1) < 1e-12);
}

TEST_CASE("metrics errors") {
  CHECK_THROWS_AS(compute_metrics({}, {}, 2), DataError);
  CHECK_THROWS_AS(compute_metrics({0}, {0, 1}, 2), DimensionError);
  CHECK_THROWS_AS(compute_metrics({2}, {0}, 2), DataError);
}
