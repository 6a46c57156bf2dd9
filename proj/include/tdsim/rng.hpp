#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace tdsim {

// splitmix64 step, used to derive independent stream seeds from one master
// seed. Same stream id always maps to the same child seed.
inline uint64_t derive_seed(uint64_t master, uint64_t stream) {
  uint64_t z = master + stream * 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d4a261214289bbULL;
  return z ^ (z >> 31);
}

// Deterministic RNG wrapper. We draw raw 64-bit words from mt19937_64 and do
// the float conversions ourselves so the stream is identical across
// standard library implementations (std::uniform_real_distribution is not
// portable between libstdc++ versions).
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t raw() { return engine_(); }

  // Uniform on [0, 1): top 53 bits of a 64-bit draw.
  double uniform() { return (engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int n) {  // uniform on {0, .., n-1}
    return static_cast<int>(uniform() * n);
  }

  // Standard normal via Box-Muller; caches the second value of each pair.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace tdsim
