#pragma once

#include <cstdint>
#include <limits>

namespace ompsd {

constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Deterministic child seed for a named sub-task.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0) {
  return mix64(mix64(seed ^ mix64(tag)) ^ mix64(index + 0x632be59bd9b4e019ULL));
}

/// Counter-based random stream: output n is a pure function of
/// (seed, stream, n). Streams with different ids are independent, so a
/// trajectory draws the same numbers whichever thread integrates it.
class StreamRng {
 public:
  using result_type = std::uint64_t;

  StreamRng(std::uint64_t seed, std::uint64_t stream, std::uint64_t position = 0)
      : key_(derive_seed(seed, 0x5354524541ULL, stream)), position_(position) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return mix64(key_ ^ mix64(position_++)); }

  /// Uniform double in (0, 1).
  double uniform() { return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53; }

  std::uint64_t position() const { return position_; }

 private:
  std::uint64_t key_;
  std::uint64_t position_;
};

}  // namespace ompsd
