#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <utility>

namespace ftpg {

/// SplitMix64 (Steele, Lea & Flood 2014): 64-bit state, fixed-increment
/// Weyl sequence followed by a 3-round xorshift-multiply finalizer.
///
/// Everything random in the simulator (worlds, encoders, init, sampling)
/// draws from this generator so artifacts are reproducible across compilers
/// and standard libraries. The std:: distributions are deliberately avoided
/// because their algorithms are implementation-defined.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  std::uint64_t next() noexcept {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    return finalize(z);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Standard normal via the Marsaglia polar method; the spare deviate is cached.
  double gaussian() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u = 0.0, v = 0.0, s = 0.0;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double factor = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * factor;
    has_spare_ = true;
    return u * factor;
  }

  /// Unbiased integer in [0, bound) by rejection; bound must be > 0.
  std::uint64_t below(std::uint64_t bound) noexcept {
    const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % bound);
    std::uint64_t x = next();
    while (x >= limit) x = next();
    return x % bound;
  }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  static constexpr std::uint64_t finalize(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Order-sensitive hash of a seed tuple, used to derive independent child streams.
constexpr std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) noexcept {
  std::uint64_t h = 0x6a09e667f3bcc909ULL;
  for (std::uint64_t p : parts) {
    h = SplitMix64::finalize(h ^ SplitMix64::finalize(p + 0x9e3779b97f4a7c15ULL));
  }
  return h;
}

// Stream tags keep derived seeds for different purposes apart.
enum class Stream : std::uint64_t {
  encoder = 1,
  handcrafted = 2,
  world = 3,
  shard_classes = 4,
  shard_shots = 5,
  client_batch = 6,
  client_sampling = 7,
  model_init = 8,
};

inline SplitMix64 make_stream(std::uint64_t seed, Stream tag,
                              std::initializer_list<std::uint64_t> extra = {}) {
  std::uint64_t h = derive_seed({seed, static_cast<std::uint64_t>(tag)});
  for (std::uint64_t e : extra) h = derive_seed({h, e});
  return SplitMix64(h);
}

}  // namespace ftpg
