#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace sml {

// Deterministic random source. Wraps std::mt19937_64 but derives all
// distributions from raw 64-bit draws, so sequences are reproducible across
// standard library implementations and the full state round-trips through
// text serialization (needed for checkpoint resume).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t uniform_u64(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::uniform_u64: n must be > 0");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

  // Uniform double in [0, 1).
  double uniform() { return std::ldexp(static_cast<double>(gen_() >> 11), -53); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller. Stateless on purpose: no cached second
  // sample to serialize.
  double normal() {
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::string serialize() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
    if (is.fail()) throw std::runtime_error("Rng::deserialize: malformed state");
  }

  bool operator==(const Rng& other) const { return gen_ == other.gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace sml
