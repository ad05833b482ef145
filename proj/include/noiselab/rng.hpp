#pragma once

#include <cstdint>
#include <string_view>

namespace noiselab {

// Independent streams derived from one seed.
enum class Stream : std::uint64_t {
  Data = 1,
  Teacher = 2,
  Init = 3,
  Batch = 4,
  Test = 5,
};

// Counter-addressable generator: draw number k of (seed, stream) is a pure
// function of the triple, so any run can be replayed or skipped ahead.
// The sequence for a fixed (seed, stream) is SplitMix64 seeded with a
// per-stream key.
class CounterRng {
 public:
  static constexpr std::string_view kName = "splitmix64-counter/box-muller";

  CounterRng(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter = 0);
  CounterRng(std::uint64_t seed, Stream stream, std::uint64_t counter = 0)
      : CounterRng(seed, static_cast<std::uint64_t>(stream), counter) {}

  static std::uint64_t at(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter);

  std::uint64_t next_u64();
  // Uniform on the open interval (0, 1).
  double uniform();
  // Standard normal; consumes exactly two counters.
  double normal();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  std::uint64_t counter() const { return counter_; }
  void seek(std::uint64_t counter) { counter_ = counter; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

std::uint64_t splitmix64(std::uint64_t z);

}  // namespace noiselab
