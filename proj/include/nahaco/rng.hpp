#pragma once

#include <cstdint>
#include <random>

namespace nahaco {

// SplitMix64 finalizer, used to whiten seeds and derive independent streams.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Deterministic child-stream seed for (base, a, b, c). Used wherever two
// consumers must not share a stream (per-ant, per-epoch, per-instance).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t s = mix64(base);
    s = mix64(s ^ a);
    s = mix64(s ^ b);
    s = mix64(s ^ c);
    return s;
}

// mt19937_64 with hand-rolled conversions. The raw engine output is pinned by
// the standard; std::uniform_*_distribution is implementation-defined and
// would break cross-platform reproducibility.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // [0, n), unbiased rejection sampling
    std::uint64_t uniform_int(std::uint64_t n) {
        const std::uint64_t threshold = (0 - n) % n;
        for (;;) {
            const std::uint64_t x = engine_();
            if (x >= threshold) return x % n;
        }
    }

  private:
    std::mt19937_64 engine_;
};

}  // namespace nahaco
