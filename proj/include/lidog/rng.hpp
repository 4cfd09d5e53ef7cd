#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace lidog {

// Hand-rolled SplitMix64. Standard-library distributions are
// implementation-defined; everything here must reproduce bit-for-bit.
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

// Stable sub-seed for a named purpose. All randomness in the project fans
// out from one root seed through this function.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose,
                                 std::uint64_t index = 0) {
  std::uint64_t h = mix64(seed + 0x9E3779B97F4A7C15ull + fnv1a64(purpose));
  return mix64(h ^ (index + 0x9E3779B97F4A7C15ull));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ull;
    return mix64(state_);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n) without division (Lemire reduction); n == 0 is invalid.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  // Box-Muller; draws two values per call so the stream stays stateless.
  double normal(double sigma) {
    double u1 = static_cast<double>((next() >> 11) + 1) * 0x1.0p-53;  // (0,1]
    double u2 = uniform();
    return sigma * std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

 private:
  std::uint64_t state_;
};

}  // namespace lidog
