#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

// Finite checks at op boundaries are active in debug builds only.
// Define MIAT_CHECK_FINITE=0/1 to force either way.
#ifndef MIAT_CHECK_FINITE
#ifdef NDEBUG
#define MIAT_CHECK_FINITE 0
#else
#define MIAT_CHECK_FINITE 1
#endif
#endif

namespace miat {

// Error taxonomy. The CLI maps these onto exit codes.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error("data error: " + msg) {}
};
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error("usage error: " + msg) {}
};

// Deterministic, serializable PRNG (xoshiro256** seeded via splitmix64).
// Kept self-contained so checkpointed runs resume bit-exactly; std::
// distributions are implementation-defined and would break that contract.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& word : state_) {
      x += 0x9e3779b97f4a7c15ULL;
      std::uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      word = z ^ (z >> 31);
    }
  }

  std::uint64_t next_u64() {
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

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; no cached spare so the state stays
  // exactly four words.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  const std::uint64_t* state() const { return state_; }
  void set_state(const std::uint64_t words[4]) {
    for (int i = 0; i < 4; ++i) state_[i] = words[i];
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t state_[4]{};
};

}  // namespace miat
