#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "pclsr/errors.hpp"

namespace pclsr {

/// Deterministic random stream. All draws go through uniform01/uniform_int,
/// which are pinned to the raw mt19937_64 output so results do not depend on
/// the standard library's distribution implementations.
class RandomSource {
 public:
  explicit RandomSource(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_raw() { return eng_(); }

  /// Uniform in [0, 1) with 53 bits of mantissa.
  double uniform01() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform01();
  }

  /// Uniform integer in [lo, hi], both inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (hi < lo) throw ParamError("uniform_int: empty range");
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    auto v = static_cast<std::uint64_t>(uniform01() * static_cast<double>(span));
    if (v >= span) v = span - 1;
    return lo + static_cast<std::int64_t>(v);
  }

  bool bernoulli(double p) { return uniform01() < p; }

  /// Standard normal via Box-Muller (single value, second one discarded to
  /// keep the stream position easy to reason about).
  double normal() {
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  /// Engine state as text, for checkpointing.
  std::string serialize() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void deserialize(const std::string& state) {
    std::istringstream is(state);
    is >> eng_;
    if (is.fail()) throw IoError("RandomSource: bad serialized state");
  }

 private:
  std::mt19937_64 eng_;
};

/// splitmix64 finalizer, used to decorrelate derived seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Named sub-stream of a master seed; `tag` distinguishes consumers.
inline RandomSource derive_stream(std::uint64_t seed, std::uint64_t tag) {
  return RandomSource(mix_seed(seed ^ mix_seed(tag)));
}

}  // namespace pclsr
