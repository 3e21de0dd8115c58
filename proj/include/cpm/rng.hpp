#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace cpm {

// Seedable random stream. The engine is std::mt19937_64, whose output
// sequence is fixed by the standard; the distributions below are written
// out explicitly because the std:: distributions are implementation defined
// and would break cross-platform replay.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer on [0, n). Rejection sampling keeps it unbiased.
  int uniform_int(int n);

  // Standard normal via Box-Muller (one draw per call, no cached spare).
  double normal();
  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  std::string state() const;
  void set_state(const std::string& text);

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

// Deterministic child seed for a named stream (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace cpm
