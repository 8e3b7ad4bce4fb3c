#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace pso {

namespace detail {

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Deterministic named substream. Equal (seed, label) pairs always replay the
/// same draw sequence; distinct labels give decorrelated streams. All
/// distributions are hand-rolled on top of raw 64-bit draws so sequences do
/// not depend on the standard library's distribution implementations.
class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::string_view label) : label_(label) {
    std::uint64_t s = seed ^ detail::fnv1a64(label);
    std::uint64_t w0 = detail::splitmix64(s);
    std::uint64_t w1 = detail::splitmix64(s);
    std::seed_seq seq{static_cast<std::uint32_t>(w0), static_cast<std::uint32_t>(w0 >> 32),
                      static_cast<std::uint32_t>(w1), static_cast<std::uint32_t>(w1 >> 32)};
    gen_.seed(seq);
  }

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), rejection-sampled to stay unbiased.
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t draw;
    do {
      draw = gen_();
    } while (draw >= limit);
    return static_cast<int>(draw % un);
  }

  double normal(double mean, double sigma) {
    // Box-Muller, cosine branch only.
    constexpr double two_pi = 6.283185307179586476925287;
    double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    double u2 = uniform();
    return mean + sigma * std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  /// Draw an index from an unnormalized weight vector via inverse CDF.
  int sample_discrete(const std::vector<double>& weights) {
    if (weights.empty()) throw std::invalid_argument("sample_discrete: empty weights");
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw std::invalid_argument("sample_discrete: nonpositive total weight");
    double u = uniform() * total;
    double cum = 0.0;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
      cum += weights[i];
      if (u < cum) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
  }

  const std::string& label() const { return label_; }

 private:
  std::mt19937_64 gen_;
  std::string label_;
};

inline RandomStream seeded_rng(std::uint64_t seed, std::string_view label) {
  return RandomStream(seed, label);
}

}  // namespace pso
