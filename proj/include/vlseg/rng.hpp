#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace vlseg {

// Explicit random stream. Every stochastic operation takes one of these so
// results are a pure function of (inputs, seed); state round-trips through
// text for checkpointing.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Independent stream for (seed, stream, index), e.g. per training step.
  static Rng derive(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);

  double uniform(double lo = 0.0, double hi = 1.0);
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);  // inclusive
  double normal(double mean = 0.0, double stddev = 1.0);
  bool bernoulli(double p);
  std::uint64_t next_u64() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }

  std::string serialize() const;
  static Rng deserialize(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

}  // namespace vlseg
