#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace crosspoint {

inline constexpr std::uint64_t fnv1a_offset = 14695981039346656037ULL;
inline constexpr std::uint64_t fnv1a_prime = 1099511628211ULL;

/// 64-bit FNV-1a, optionally continuing from a previous state.
inline std::uint64_t fnv1a(std::span<const unsigned char> bytes,
                           std::uint64_t state = fnv1a_offset) {
  for (unsigned char b : bytes) {
    state ^= b;
    state *= fnv1a_prime;
  }
  return state;
}

inline std::uint64_t fnv1a(std::string_view text,
                           std::uint64_t state = fnv1a_offset) {
  return fnv1a(std::span(reinterpret_cast<const unsigned char*>(text.data()),
                         text.size()),
               state);
}

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Identifies an independent random stream. Streams are derived
// hierarchically from a master seed and a sequence of integer or text tags,
// e.g. stream(seed).child("batch").child(epoch).child(sample_id).
class StreamId {
 public:
  constexpr StreamId() = default;
  constexpr explicit StreamId(std::uint64_t seed) : value_(splitmix64(seed)) {}

  constexpr StreamId child(std::uint64_t tag) const {
    StreamId out;
    out.value_ = splitmix64(value_ ^ splitmix64(tag + 0x632BE59BD9B4E019ULL));
    return out;
  }
  StreamId child(std::string_view tag) const { return child(fnv1a(tag)); }

  constexpr std::uint64_t value() const { return value_; }
  constexpr bool operator==(const StreamId&) const = default;

 private:
  std::uint64_t value_ = splitmix64(0);
};

// Deterministic generator. The distributions are implemented here rather
// than with <random>'s distribution classes, whose output is
// implementation-defined; this keeps every draw identical across standard
// libraries.
class Rng {
 public:
  explicit Rng(StreamId stream) : engine_(stream.value()) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace crosspoint
