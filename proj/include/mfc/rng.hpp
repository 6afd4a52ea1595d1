#pragma once

#include <cmath>
#include <cstdint>

namespace mfc {

/// Philox4x32-10 counter-based block cipher (Salmon et al., "Parallel random
/// numbers: as easy as 1, 2, 3").  Maps a 128-bit counter and 64-bit key to
/// four independent 32-bit words.  Pure function of its inputs, so any stream
/// element can be generated directly: no state to carry, no order dependence.
struct PhiloxBlock {
  std::uint32_t w[4];
};

inline PhiloxBlock philox4x32(std::uint32_t c0, std::uint32_t c1, std::uint32_t c2,
                              std::uint32_t c3, std::uint32_t k0, std::uint32_t k1) {
  constexpr std::uint32_t kMul0 = 0xD2511F53u;
  constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * c0;
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * c2;
    const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
    const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
    c0 = hi1 ^ c1 ^ k0;
    c1 = lo1;
    c2 = hi0 ^ c3 ^ k1;
    c3 = lo0;
    k0 += kWeyl0;
    k1 += kWeyl1;
  }
  return PhiloxBlock{{c0, c1, c2, c3}};
}

/// Uniform double in (0, 1] built from 53 bits of a 64-bit word.  Never zero,
/// so it is safe under log().
inline double uniform_from_bits(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 1.0) * 0x1.0p-53;
}

/// Stateless generator of independent N(0,1) draws addressed by
/// (step k, node j, atom i, channel).  Distinct channels are decorrelated by
/// mixing the channel into the key; distinct (k, j, i) occupy distinct
/// counters.  Reproducible across platforms, thread counts, and evaluation
/// order by construction.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  /// Standard normal via Box-Muller from one Philox block.
  double normal(std::uint64_t k, std::uint64_t j, std::uint64_t i,
                std::uint32_t channel) const {
    const PhiloxBlock b = block(k, j, i, channel);
    const std::uint64_t u_bits =
        (static_cast<std::uint64_t>(b.w[0]) << 32) | b.w[1];
    const std::uint64_t v_bits =
        (static_cast<std::uint64_t>(b.w[2]) << 32) | b.w[3];
    const double u = uniform_from_bits(u_bits);
    const double v = uniform_from_bits(v_bits);
    return std::sqrt(-2.0 * std::log(u)) * std::cos(6.283185307179586476925287 * v);
  }

  /// Uniform in (0, 1].
  double uniform(std::uint64_t k, std::uint64_t j, std::uint64_t i,
                 std::uint32_t channel) const {
    const PhiloxBlock b = block(k, j, i, channel);
    return uniform_from_bits((static_cast<std::uint64_t>(b.w[0]) << 32) | b.w[1]);
  }

  PhiloxBlock block(std::uint64_t k, std::uint64_t j, std::uint64_t i,
                    std::uint32_t channel) const {
    // Channel perturbs the key (distinct cipher per channel); (k, i, j) fill
    // the 128-bit counter.  k and i are far below 2^32 in practice.
    const std::uint64_t key =
        seed_ ^ (0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(channel) + 1));
    return philox4x32(static_cast<std::uint32_t>(k) ^ static_cast<std::uint32_t>(k >> 32),
                      static_cast<std::uint32_t>(i) ^ static_cast<std::uint32_t>(i >> 32),
                      static_cast<std::uint32_t>(j), static_cast<std::uint32_t>(j >> 32),
                      static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32));
  }

 private:
  std::uint64_t seed_;
};

/// Channel layout used across the library.  Idiosyncratic noise for state
/// coordinate d uses channel d; everything else lives in disjoint bands so
/// no two draws ever share a (key, counter) pair.
namespace rng_channel {
inline constexpr std::uint32_t kIdio = 0;         // + coordinate index
inline constexpr std::uint32_t kInit = 1u << 8;   // + coordinate index
inline constexpr std::uint32_t kPath = 1u << 9;   // sampled child selection
inline constexpr std::uint32_t kProbe = 1u << 10; // + coordinate index (direction draws)
inline constexpr std::uint32_t kTag = 1u << 11;   // + coordinate index (tagged-atom noise)
}  // namespace rng_channel

}  // namespace mfc
