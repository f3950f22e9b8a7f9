#include "scaffold/rng.hpp"

#include <cmath>

namespace scaffold {

namespace {

constexpr std::uint32_t kPhiloxW32A = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW32B = 0xBB67AE85u;
constexpr std::uint32_t kPhiloxM4x32A = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM4x32B = 0xCD9E8D57u;

inline void mul_hilo(std::uint32_t a, std::uint32_t b, std::uint32_t& lo,
                     std::uint32_t& hi) {
    std::uint64_t p = static_cast<std::uint64_t>(a) * b;
    lo = static_cast<std::uint32_t>(p);
    hi = static_cast<std::uint32_t>(p >> 32);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::array<std::uint32_t, 2> make_key(std::uint64_t seed,
                                             std::uint32_t stream) {
    std::uint64_t k = splitmix64(seed ^ splitmix64(stream));
    return {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
}

inline std::uint64_t block_to_u64(const std::array<std::uint32_t, 4>& b) {
    return (static_cast<std::uint64_t>(b[0]) << 32) | b[1];
}

// (v + 0.5) / 2^64: strictly inside (0,1), so logs and Box-Muller are safe.
inline double u64_to_unit(std::uint64_t v) {
    return (static_cast<double>(v) + 0.5) * 0x1.0p-64;
}

inline std::uint64_t raw_at(std::uint64_t seed, std::uint32_t stream,
                            std::uint64_t a, std::uint32_t b, std::uint32_t c) {
    std::array<std::uint32_t, 4> counter = {
        static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), b, c};
    return block_to_u64(philox4x32(counter, make_key(seed, stream)));
}

}  // namespace

std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key) {
    for (int round = 0; round < 10; ++round) {
        std::uint32_t lo0, hi0, lo1, hi1;
        mul_hilo(kPhiloxM4x32A, counter[0], lo0, hi0);
        mul_hilo(kPhiloxM4x32B, counter[2], lo1, hi1);
        counter = {hi1 ^ counter[1] ^ key[0], lo1, hi0 ^ counter[3] ^ key[1], lo0};
        key[0] += kPhiloxW32A;
        key[1] += kPhiloxW32B;
    }
    return counter;
}

double uniform_at(std::uint64_t seed, std::uint32_t stream, std::uint64_t a,
                  std::uint32_t b, std::uint32_t c) {
    return u64_to_unit(raw_at(seed, stream, a, b, c));
}

double normal_at(std::uint64_t seed, std::uint32_t stream, std::uint64_t a,
                 std::uint32_t b, std::uint32_t c) {
    double u1 = uniform_at(seed, stream, a, b, c);
    double u2 = uniform_at(seed, stream, a, b, c + 1);
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
}

double Rng::uniform() {
    return u64_to_unit(next_u64());
}

double Rng::normal() {
    double u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
}

std::uint64_t Rng::next_u64() {
    std::uint64_t v = raw_at(seed_ ^ splitmix64(substream_), rng_stream::kStream,
                             position_, 0, 0);
    ++position_;
    return v;
}

}  // namespace scaffold
