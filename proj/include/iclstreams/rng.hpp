#ifndef ICLSTREAMS_RNG_HPP
#define ICLSTREAMS_RNG_HPP

#include <cmath>
#include <cstdint>
#include <numbers>

#include "iclstreams/errors.hpp"

namespace icls {

// Counter-based RNG (SplitMix64 core). A generator is a (key, counter) pair;
// child streams are derived by mixing a stream id into the key, so every
// consumer of randomness in an experiment owns an independent, reproducible
// stream keyed by (master seed, stream ids...). No global state anywhere.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : key_(mix64(seed + kGolden)) {}

  // Independent child stream. Derivation is order-sensitive:
  // stream(a).stream(b) != stream(b).stream(a).
  CounterRng stream(std::uint64_t id) const {
    CounterRng child(0);
    child.key_ = mix64(key_ ^ mix64(id + kGolden));
    child.counter_ = 0;
    return child;
  }

  std::uint64_t next_u64() {
    counter_ += kGolden;
    return mix64(key_ + counter_);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ContractError("uniform_int: n must be positive");
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller. Consumes two words per call so the
  // stream position is a pure function of the number of calls.
  double normal() {
    // (0, 1] so the log is finite.
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double stddev) { return stddev * normal(); }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

  // SplitMix64 finalizer.
  static std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Well-known stream ids so independent subsystems never collide.
namespace streams {
inline constexpr std::uint64_t kTable = 1;
inline constexpr std::uint64_t kLayout = 2;
inline constexpr std::uint64_t kObjectNoise = 3;
inline constexpr std::uint64_t kInit = 4;
inline constexpr std::uint64_t kTrain = 5;
inline constexpr std::uint64_t kEval = 6;
inline constexpr std::uint64_t kSweep = 7;
inline constexpr std::uint64_t kFreshTable = 8;
inline constexpr std::uint64_t kGenerate = 9;
}  // namespace streams

}  // namespace icls

#endif  // ICLSTREAMS_RNG_HPP
