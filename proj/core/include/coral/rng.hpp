#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace coral {

// Deterministic counter-based generator (splitmix64 core). Distributions are
// hand-rolled so draws are bit-identical across standard libraries, which the
// dataset and trainer determinism contracts rely on.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  /// Independent stream derived from (master seed, stream name). Consuming one
  /// stream never perturbs another.
  static Rng stream(std::uint64_t master_seed, const std::string& name);

  std::uint64_t next_u64();

  /// Uniform in [0, 1).
  double uniform();

  /// Uniform integer in [0, n). Requires n >= 1.
  std::uint64_t uniform_below(std::uint64_t n);

  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Fisher-Yates shuffle.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// k distinct indices drawn uniformly from [0, n), sorted ascending.
  std::vector<int> sample_without_replacement(int n, int k);

  /// Random permutation of [0, n).
  std::vector<int> permutation(int n);

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

/// FNV-1a over a byte string; used for config hashes and stream derivation.
std::uint64_t fnv1a(const std::string& bytes);

}  // namespace coral
