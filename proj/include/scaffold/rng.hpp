#pragma once

#include <array>
#include <cstdint>

namespace scaffold {

// Philox 4x32-10 counter-based generator (Salmon et al., SC'11).
// A (key, counter) pair always yields the same block, so any draw can be
// addressed by where it is used instead of by how many draws preceded it.
// That is what makes cached and uncached sampling consume identical
// randomness, and what makes training resumable bit-exactly.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key);

// Stream ids keep independent uses of the same seed from colliding.
namespace rng_stream {
constexpr std::uint32_t kParamInit  = 1;
constexpr std::uint32_t kCorruption = 2;
constexpr std::uint32_t kTimeDraw   = 3;
constexpr std::uint32_t kBatchPerm  = 4;
constexpr std::uint32_t kSampler    = 5;
constexpr std::uint32_t kSynthetic  = 6;
constexpr std::uint32_t kEval       = 7;
constexpr std::uint32_t kStream     = 8;
}  // namespace rng_stream

// Uniform draw in (0,1), addressed by (seed, stream, a, b, c).
double uniform_at(std::uint64_t seed, std::uint32_t stream, std::uint64_t a,
                  std::uint32_t b, std::uint32_t c);

// Standard normal draw at the same kind of address (consumes c and c+1
// internally, so callers should space c by 2 when mixing with uniform_at).
double normal_at(std::uint64_t seed, std::uint32_t stream, std::uint64_t a,
                 std::uint32_t b, std::uint32_t c);

// Sequential stream for callers that just want a seeded uniform source.
// State is a single counter, so it serializes as one integer.
class Rng {
  public:
    explicit Rng(std::uint64_t seed, std::uint64_t substream = 0)
        : seed_(seed), substream_(substream) {}

    double uniform();  // (0,1)
    double normal();
    std::uint64_t next_u64();

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t substream() const noexcept { return substream_; }
    std::uint64_t position() const noexcept { return position_; }
    void seek(std::uint64_t position) noexcept { position_ = position; }

  private:
    std::uint64_t seed_;
    std::uint64_t substream_;
    std::uint64_t position_ = 0;
};

}  // namespace scaffold
