#pragma once

#include <cstdint>
#include <initializer_list>

namespace matpo {

// splitmix64: tiny, fast, bit-exact on every platform we care about.
// Used both as the generator and for deriving independent child streams,
// so rollout results never depend on scheduling or on std library internals.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Folds an arbitrary list of parts (seed, step, query index, ...) into one seed.
inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t s = 0x243f6a8885a308d3ULL;
    for (std::uint64_t p : parts) {
        s ^= p + 0x9e3779b97f4a7c15ULL + (s << 6) + (s >> 2);
        std::uint64_t t = s;
        s = splitmix64(t) ^ (p * 0xd1342543de82ef95ULL);
    }
    return s;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return splitmix64(state_); }

    // 53-bit uniform in [0, 1); avoids std::uniform_real_distribution, which
    // is not reproducible across standard library implementations.
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Unbiased integer in [0, n) via rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do { x = next_u64(); } while (x >= limit);
        return x % n;
    }

    // Derives an independent child stream; the parent advances once.
    Rng fork(std::uint64_t tag) {
        return Rng(mix_seed({next_u64(), tag, 0x5eedc0defeedULL}));
    }

private:
    std::uint64_t state_;
};

} // namespace matpo
