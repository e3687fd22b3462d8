#include <doctest.h>

#include "multifuse/linalg.hpp"
#include "multifuse/rng.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

using namespace multifuse;

namespace {

Matrix random_symmetric(Index n, Rng& rng) {
  Matrix a(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j <= i; ++j) {
      const double v = rng.normal();
      a(i, j) = v;
      a(j, i) = v;
    }
  }
  return a;
}

}  // namespace

TEST_CASE("sym_eig identity") {
  auto eig = sym_eig(Matrix::Identity(3, 3));
  for (Index i = 0; i < 3; ++i) CHECK(eig.values(i) == doctest::Approx(1.0));
}

TEST_CASE("sym_eig diagonal") {
  Matrix a = Matrix::Zero(2, 2);
  a(0, 0) = 3.0;
  a(1, 1) = 1.0;
  auto eig = sym_eig(a);
  CHECK(eig.values(0) == doctest::Approx(3.0));
  CHECK(eig.values(1) == doctest::Approx(1.0));
  CHECK(std::abs(eig.vectors(0, 0)) == doctest::Approx(1.0));
  CHECK(std::abs(eig.vectors(1, 1)) == doctest::Approx(1.0));
}

TEST_CASE("sym_eig 2x2 hand oracle") {
  // [[2,1],[1,2]]: characteristic polynomial (2-l)^2 - 1 -> l in {3, 1},
  // eigenvectors (1,1)/sqrt2 and (1,-1)/sqrt2 up to sign.
  Matrix a(2, 2);
  a << 2, 1, 1, 2;
  auto eig = sym_eig(a);
  CHECK(eig.values(0) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(eig.values(1) == doctest::Approx(1.0).epsilon(1e-12));
  const double s = 1.0 / std::sqrt(2.0);
  Vector v0 = eig.vectors.col(0);
  Vector v1 = eig.vectors.col(1);
  CHECK(std::min((v0 - Vector::Constant(2, s)).norm(),
                 (v0 + Vector::Constant(2, s)).norm()) < 1e-10);
  Vector e1(2);
  e1 << s, -s;
  CHECK(std::min((v1 - e1).norm(), (v1 + e1).norm()) < 1e-10);
}

TEST_CASE("sym_eig rejects bad input") {
  CHECK_THROWS_AS(sym_eig(Matrix::Zero(2, 3)), DimensionError);
  Matrix a(2, 2);
  a << 1, 2, 3, 4;
  CHECK_THROWS_AS(sym_eig(a), DimensionError);
}

TEST_CASE("sym_eig residual, orthonormality and reconstruction") {
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.uniform_int(49));
    Matrix a = random_symmetric(n, rng);
    auto eig = sym_eig(a);
    for (Index i = 0; i + 1 < n; ++i) CHECK(eig.values(i) >= eig.values(i + 1));
    for (Index i = 0; i < n; ++i) {
      Vector r = a * eig.vectors.col(i) - eig.values(i) * eig.vectors.col(i);
      CHECK(r.norm() / eig.vectors.col(i).norm() < 1e-8);
    }
    CHECK((eig.vectors.transpose() * eig.vectors - Matrix::Identity(n, n))
              .cwiseAbs()
              .maxCoeff() < 1e-8);
    Matrix recon =
        eig.vectors * eig.values.asDiagonal() * eig.vectors.transpose();
    CHECK((recon - a).norm() / a.norm() < 1e-8);
  }
}

TEST_CASE("rng reproducibility") {
  Rng a(123), b(123);
  for (int i = 0; i < 10000; ++i) CHECK(a.uniform() == b.uniform());
  Rng c(123), d(124);
  int diff = 0;
  for (int i = 0; i < 100; ++i) diff += c.uniform() != d.uniform();
  CHECK(diff > 90);
}

TEST_CASE("rng substreams are independent and deterministic") {
  Rng root(7);
  Rng s1 = root.substream("gbt");
  Rng s2 = root.substream("fusenet");
  Rng s1b = Rng(7).substream("gbt");
  CHECK(s1.uniform() == s1b.uniform());
  CHECK(s1.uniform() != s2.uniform());
}

TEST_CASE("beta(0.2, 0.2) moments") {
  Rng rng(99);
  const int n = 100000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.beta(0.2, 0.2);
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::abs(mean - 0.5) < 0.01);
  // Closed form: ab / ((a+b)^2 (a+b+1)) = 0.04 / (0.16 * 1.4)
  CHECK(std::abs(var - 0.178571) < 0.01);
}

TEST_CASE("beta(1,1) is uniform (KS statistic)") {
  Rng rng(5);
  const int n = 100000;
  std::vector<double> xs(n);
  for (auto& x : xs) x = rng.beta(1.0, 1.0);
  std::sort(xs.begin(), xs.end());
  double ks = 0.0;
  for (int i = 0; i < n; ++i) {
    const double cdf = xs[static_cast<std::size_t>(i)];
    ks = std::max(ks, std::abs(cdf - static_cast<double>(i) / n));
    ks = std::max(ks, std::abs(cdf - static_cast<double>(i + 1) / n));
  }
  CHECK(ks < 0.01);
}

TEST_CASE("beta mean matches a/(a+b) in the gamma regime") {
  Rng rng(11);
  const int n = 100000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += rng.beta(2.0, 5.0);
  CHECK(std::abs(sum / n - 2.0 / 7.0) < 0.01);
}

TEST_CASE("beta rejects non-positive parameters") {
  Rng rng(1);
  CHECK_THROWS_AS(rng.beta(0.0, 1.0), ConfigError);
  CHECK_THROWS_AS(rng.beta(1.0, -2.0), ConfigError);
}

TEST_CASE("normal moments") {
  Rng rng(3);
  const int n = 100000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  CHECK(std::abs(sum / n) < 0.02);
  CHECK(std::abs(sq / n - 1.0) < 0.02);
}

TEST_CASE("matrix multiply associativity") {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    Matrix a(10, 10), b(10, 10), c(10, 10);
    for (Index i = 0; i < 10; ++i) {
      for (Index j = 0; j < 10; ++j) {
        a(i, j) = rng.normal();
        b(i, j) = rng.normal();
        c(i, j) = rng.normal();
      }
    }
    Matrix lhs = (a * b) * c;
    Matrix rhs = a * (b * c);
    CHECK((lhs - rhs).norm() / lhs.norm() < 1e-10);
  }
}
