#pragma once

#include <cmath>
#include <cstdint>
#include <random>

// Deterministic RNG helpers. Engines are std::mt19937_64 (bit-portable), but
// all distributions are hand-rolled here because the standard library ones are
// implementation-defined and would break cross-toolchain reproducibility.
namespace hte {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent stream for (seed, index) pairs, e.g. one per tree.
inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t index,
                                   std::uint64_t salt = 0) {
  return std::mt19937_64(splitmix64(splitmix64(seed ^ salt) + index));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}
  explicit Rng(std::mt19937_64 engine) : engine_(engine) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, bound). Rejection sampling keeps it unbiased.
  std::uint64_t uniform_int(std::uint64_t bound) {
    if (bound <= 1) return 0;
    std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      std::uint64_t r = engine_();
      if (r >= threshold) return r % bound;
    }
  }

  double normal(double mean = 0.0, double sd = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + sd * spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double radius = std::sqrt(-2.0 * std::log(u1));
    double angle = 2.0 * M_PI * u2;
    spare_ = radius * std::sin(angle);
    have_spare_ = true;
    return mean + sd * radius * std::cos(angle);
  }

  // Student t with integer df, built from a normal and df exponentials.
  double student_t(int df) {
    double chi2 = 0.0;
    for (int i = 0; i < df; ++i) {
      double g = normal();
      chi2 += g * g;
    }
    return normal() / std::sqrt(chi2 / df);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Fisher-Yates shuffle of the first n entries.
  template <typename T>
  void shuffle(T* data, std::size_t n) {
    for (std::size_t i = n; i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(data[i - 1], data[j]);
    }
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace hte
