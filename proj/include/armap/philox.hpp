#pragma once

// Counter-based random numbers. Every draw is a pure function of
// (key, counter), so results never depend on the order in which elements
// are visited or on how work is split across threads.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace armap::rng {

using Counter = std::array<std::uint32_t, 4>;
using Key = std::array<std::uint32_t, 2>;

namespace detail {

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi,
                    std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

}  // namespace detail

/// Philox4x32 with 10 rounds (Salmon et al., Random123).
inline Counter philox4x32(Counter ctr, Key key) {
  constexpr std::uint32_t kM0 = 0xD2511F53u;
  constexpr std::uint32_t kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u;
  constexpr std::uint32_t kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    detail::mulhilo(kM0, ctr[0], hi0, lo0);
    detail::mulhilo(kM1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kW0;
    key[1] += kW1;
  }
  return ctr;
}

/// 64-bit FNV-1a; used to fold tensor names into stream identifiers.
constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

/// SplitMix64 finalizer; derives child seeds from (parent, index).
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index) {
  return mix64(parent ^ mix64(index));
}

/// A keyed stream: draw(i) is the i-th 128-bit block of the stream.
class Stream {
 public:
  constexpr Stream(std::uint64_t seed, std::uint64_t stream_id)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
        stream_id_(stream_id) {}

  Counter block(std::uint64_t index) const {
    return philox4x32({static_cast<std::uint32_t>(index),
                       static_cast<std::uint32_t>(index >> 32),
                       static_cast<std::uint32_t>(stream_id_),
                       static_cast<std::uint32_t>(stream_id_ >> 32)},
                      key_);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform(std::uint64_t index) const {
    const Counter c = block(index);
    const std::uint64_t bits =
        (static_cast<std::uint64_t>(c[0]) << 32 | c[1]) >> 11;
    return static_cast<double>(bits) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller on the two 64-bit halves of one block.
  double normal(std::uint64_t index) const {
    const Counter c = block(index);
    const std::uint64_t a = (static_cast<std::uint64_t>(c[0]) << 32 | c[1]) >> 11;
    const std::uint64_t b = (static_cast<std::uint64_t>(c[2]) << 32 | c[3]) >> 11;
    // u1 in (0, 1] keeps the log finite.
    const double u1 = (static_cast<double>(a) + 1.0) * 0x1.0p-53;
    const double u2 = static_cast<double>(b) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  Key key_;
  std::uint64_t stream_id_;
};

}  // namespace armap::rng
