#pragma once

#include <cstdint>
#include <string_view>

namespace cwmerge {

/// Counter-based keyed generator. Every draw is a pure function of
/// (key, counter), so results do not depend on iteration order or on
/// how work is split across threads.
namespace rng {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// FNV-1a, 64 bit.
inline constexpr std::uint64_t hash_string(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

inline constexpr std::uint64_t combine(std::uint64_t a, std::uint64_t b) noexcept {
  return splitmix64(a ^ splitmix64(b + 0x632BE59BD9B4E019ull));
}

class KeyedStream {
 public:
  constexpr KeyedStream() = default;
  constexpr explicit KeyedStream(std::uint64_t key) noexcept : key_(key) {}
  constexpr KeyedStream(std::uint64_t seed, std::string_view name) noexcept
      : key_(combine(seed, hash_string(name))) {}

  /// Sub-stream for a nested key (model index, anchor, ...).
  constexpr KeyedStream derive(std::uint64_t sub) const noexcept {
    return KeyedStream(combine(key_, sub));
  }
  constexpr KeyedStream derive(std::string_view sub) const noexcept {
    return KeyedStream(combine(key_, hash_string(sub)));
  }

  constexpr std::uint64_t bits(std::uint64_t counter) const noexcept {
    return splitmix64(key_ ^ splitmix64(counter));
  }

  /// Uniform double in [0, 1) with 53 random bits.
  constexpr double uniform(std::uint64_t counter) const noexcept {
    return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n). n must be > 0.
  constexpr std::uint64_t below(std::uint64_t counter, std::uint64_t n) const noexcept {
    return static_cast<std::uint64_t>(uniform(counter) * static_cast<double>(n));
  }

  constexpr std::uint64_t key() const noexcept { return key_; }

 private:
  std::uint64_t key_ = 0;
};

}  // namespace rng
}  // namespace cwmerge
