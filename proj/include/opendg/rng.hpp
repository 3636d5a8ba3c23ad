#pragma once

#include <cstdint>
#include <random>

namespace opendg {

// Deterministic random source. The distributions are implemented here rather
// than taken from <random> so that a given seed produces the same stream on
// every standard library, which keeps checkpoints bit-reproducible.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer on [lo, hi] inclusive, rejection-sampled to avoid bias.
  int uniform_int(int lo, int hi);

  double normal(double mean = 0.0, double stddev = 1.0);

  // Marsaglia-Tsang for shape >= 1, boosted for shape < 1. Unit scale.
  double gamma(double shape);

  double beta(double a, double b) {
    double x = gamma(a);
    double y = gamma(b);
    return x / (x + y);
  }

  std::uint64_t raw() { return eng_(); }

 private:
  std::mt19937_64 eng_;
};

// Splits one base seed into independent streams keyed by up to three labels.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                          std::uint64_t b = 0, std::uint64_t c = 0);

}  // namespace opendg
