#include "multifuse/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace multifuse {

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  if (n == 0) throw ConfigError("uniform_int: n must be positive");
  // Rejection to avoid modulo bias.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  if (have_cached_normal_) {
    have_cached_normal_ = false;
    return cached_normal_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  cached_normal_ = r * std::sin(theta);
  have_cached_normal_ = true;
  return r * std::cos(theta);
}

double Rng::gamma(double shape) {
  if (shape <= 0.0) throw ConfigError("gamma: shape must be positive");
  if (shape < 1.0) {
    // Gamma(a) = Gamma(a+1) * U^(1/a)
    double u = uniform();
    while (u <= 0.0) u = uniform();
    return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x;
    double v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) {
      return d * v;
    }
  }
}

double Rng::beta(double a, double b) {
  if (a <= 0.0 || b <= 0.0) {
    throw ConfigError("beta: parameters must be positive");
  }
  if (std::max(a, b) < 1.0) {
    // Johnk: accept (U1^(1/a), U2^(1/b)) when the pair lands in the simplex.
    for (;;) {
      const double x = std::pow(uniform(), 1.0 / a);
      const double y = std::pow(uniform(), 1.0 / b);
      const double s = x + y;
      if (s > 0.0 && s <= 1.0) return x / s;
    }
  }
  const double x = gamma(a);
  const double y = gamma(b);
  return x / (x + y);
}

std::vector<Index> Rng::sample_indices(Index n, Index k) {
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  shuffle(idx);
  idx.resize(static_cast<std::size_t>(std::min(n, k)));
  std::sort(idx.begin(), idx.end());
  return idx;
}

Rng Rng::substream(const std::string& name) const {
  std::uint64_t h = fnv1a64(name);
  h ^= seed_ + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  // SplitMix64 finalizer so adjacent seeds diverge.
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ull;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebull;
  h ^= h >> 31;
  return Rng(h);
}

}  // namespace multifuse
