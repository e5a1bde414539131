#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace menet {

/// Counter-based generator. Every draw is a pure function of
/// (seed, stream, counter), so independent streams can be split off for
/// data, initialization and Monte-Carlo probes without sharing state.
class Rng {
 public:
  Rng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  double normal();
  double normal(double mean, double std) { return mean + std * normal(); }
  bool bernoulli(double p) { return uniform() < p; }

  /// Child stream keyed by `key`; does not advance this generator.
  Rng split(std::uint64_t key) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Stream identifiers used across the project.
namespace streams {
inline constexpr std::uint64_t kInit = 0x1001;
inline constexpr std::uint64_t kData = 0x2002;
inline constexpr std::uint64_t kBatch = 0x3003;
inline constexpr std::uint64_t kAugment = 0x4004;
inline constexpr std::uint64_t kProbe = 0x5005;
inline constexpr std::uint64_t kDistortion = 0x6006;
}  // namespace streams

std::vector<double> random_uniform_sphere(Rng& rng, std::size_t dim);

/// FNV-1a; stable across platforms, used to derive per-name streams.
constexpr std::uint64_t stable_hash(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace menet
