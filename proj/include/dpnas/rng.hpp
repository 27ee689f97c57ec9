#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace dpnas {

inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  return mix64(state);
}

// Hashes a base seed plus a path of indices into a child seed. Streams derived
// from distinct paths are decorrelated, which lets every node, repair step and
// episode own a private stream keyed by stable identifiers instead of sharing
// one global sequence.
inline std::uint64_t derive_seed(std::uint64_t base,
                                 std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix64(base + 0x9e3779b97f4a7c15ull);
  for (std::uint64_t p : path) {
    s = mix64(s ^ (p + 0x9e3779b97f4a7c15ull));
  }
  return s;
}

// xoshiro256** with splitmix64 seeding. The full generator state is a plain
// array of four words, so streams can be checkpointed and restored exactly.
// The normal() draw uses a single Box-Muller evaluation per call (no cached
// spare), keeping the state the only thing that matters for replay.
class RngStream {
 public:
  RngStream() : RngStream(0) {}

  explicit RngStream(std::uint64_t seed) {
    std::uint64_t s = seed;
    for (auto& word : state_) word = splitmix64_next(s);
  }

  static RngStream from_state(const std::array<std::uint64_t, 4>& st) {
    RngStream r;
    r.state_ = st;
    return r;
  }

  const std::array<std::uint64_t, 4>& state() const { return state_; }

  std::uint64_t next() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform in [0, n) via 128-bit multiply-shift; n = 0 returns 0.
  std::uint64_t uniform_int(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    constexpr double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::array<std::uint64_t, 4> state_{};
};

}  // namespace dpnas
