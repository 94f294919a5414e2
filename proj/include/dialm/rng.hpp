#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace dialm {

/// Mixes an arbitrary list of integers into one 64-bit key (splitmix64 chain).
/// Used to derive independent, reproducible seeds for steps, sequences and
/// dropout sites without threading a stateful generator through the code.
std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts);

/// Uniform [0,1) from a 64-bit hash of (key, counter). Stateless.
double hash_uniform(std::uint64_t key, std::uint64_t counter);

/// Thin wrapper around std::mt19937_64 with distribution code that does not
/// depend on the standard library's implementation-defined distributions, so
/// streams are identical across toolchains.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1).
  double uniform();

  /// Uniform integer in [0, n). n must be > 0.
  std::size_t below(std::size_t n);

  /// Standard normal via Box-Muller.
  double normal();

  /// Normal(0, stddev) truncated to [-2 stddev, 2 stddev] by resampling.
  double truncated_normal(double stddev);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

private:
  std::mt19937_64 engine_;
};

}  // namespace dialm
