#pragma once

#include "multifuse/common.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace multifuse {

// Seeded PRNG with the few distributions the toolkit needs. The engine is
// std::mt19937_64 (bit-exact by the standard); the distributions are
// implemented here rather than taken from <random> because libstdc++ /
// libc++ are free to differ on those, and reproducibility is part of the
// contract: identical seed => identical stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform();

  // Uniform on [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n);

  // Standard normal via Box-Muller (no rejection, fixed draw count).
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Gamma(shape, 1). Marsaglia-Tsang squeeze for shape >= 1, boosted from
  // Gamma(shape+1) below.
  double gamma(double shape);

  // Beta(a, b) on [0, 1]. Johnk's algorithm when max(a,b) < 1 (the
  // ratio-of-Gammas route degenerates there), ratio of Gammas otherwise.
  double beta(double a, double b);

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // First k of a shuffled [0, n) index set, ascending. Used for row/column
  // subsampling where downstream code expects sorted indices.
  std::vector<Index> sample_indices(Index n, Index k);

  // Independent generator derived from (seed, name). All toolkit randomness
  // flows from one user seed through named substreams per component.
  Rng substream(const std::string& name) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool have_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

inline double sample_beta(Rng& rng, double a, double b) { return rng.beta(a, b); }

}  // namespace multifuse
