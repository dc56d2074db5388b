#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace cer {

/// The toolkit's seeded random source. One consumer owns each instance.
using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) {
  // 53 random bits mapped to [0, 1); independent of the library's
  // distribution implementations so results are stable across toolchains.
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Standard normal via Box-Muller on uniform01.
inline double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

/// Normal(0, std) resampled until it lies within two standard deviations.
template <typename T>
std::vector<T> trunc_normal(std::size_t n, double std, Rng& rng) {
  std::vector<T> out(n);
  for (auto& v : out) {
    double z = standard_normal(rng);
    while (std::abs(z) > 2.0) z = standard_normal(rng);
    v = static_cast<T>(z * std);
  }
  return out;
}

template <typename T>
std::vector<T> normal_values(std::size_t n, double std, Rng& rng) {
  std::vector<T> out(n);
  for (auto& v : out) v = static_cast<T>(standard_normal(rng) * std);
  return out;
}

template <typename T>
std::vector<T> uniform_values(std::size_t n, double lo, double hi, Rng& rng) {
  std::vector<T> out(n);
  for (auto& v : out) v = static_cast<T>(lo + (hi - lo) * uniform01(rng));
  return out;
}

/// Fisher-Yates shuffle driven by uniform01, so the permutation for a seed
/// does not depend on the standard library's distribution code.
template <typename It>
void seeded_shuffle(It first, It last, Rng& rng) {
  const auto n = static_cast<std::size_t>(last - first);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(first[i - 1], first[std::min(j, i - 1)]);
  }
}

inline std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline void restore_rng_state(Rng& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
}

}  // namespace cer
