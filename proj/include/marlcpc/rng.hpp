#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>

#include <Eigen/Dense>

namespace marlcpc {

// Seeded random stream with self-contained sampling primitives. All
// distributions are derived from the raw mt19937_64 output here rather than
// through std:: distribution objects, so a given seed produces the same draw
// sequence on every platform and standard library.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform_range(double lo, double hi) {
    return lo + (hi - lo) * uniform();
  }

  // Uniform integer in [0, n). Lemire multiply-shift; slight bias is below
  // 2^-32 for the n used here and keeps the draw count at one word.
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    const std::uint64_t x = gen_() >> 32;
    return static_cast<int>((x * static_cast<std::uint64_t>(n)) >> 32);
  }

  // Categorical draw by CDF inversion over an (unnormalized-tolerant)
  // probability vector.
  int categorical(const Eigen::VectorXd& probs) {
    const double total = probs.sum();
    double u = uniform() * total;
    for (int i = 0; i < probs.size(); ++i) {
      u -= probs[i];
      if (u < 0.0) return i;
    }
    return static_cast<int>(probs.size()) - 1;
  }

  // Derives a child seed for an independent stream: splitmix64 finalizer
  // over the (seed, stream id) pair.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream_id) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream_id + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace marlcpc
