#pragma once

#include <cstdint>
#include <limits>
#include <string_view>

namespace maskfuse {

// Counter-based generator: output k is a SplitMix64 finalizer applied to
// key + k * golden. Substreams derive new keys, so any component can be handed
// an independent, reproducible stream without sharing mutable state.
class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed = 0) noexcept : key_(mix(seed ^ 0x6d61736b66757365ULL)) {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    result_type operator()() noexcept { return next_u64(); }

    std::uint64_t next_u64() noexcept { return mix(key_ + kGolden * (++counter_)); }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    // Uniform integer in [0, n). n must be nonzero.
    std::uint64_t below(std::uint64_t n) noexcept {
        const std::uint64_t limit = max() - max() % n;
        std::uint64_t v = next_u64();
        while (v >= limit) {
            v = next_u64();
        }
        return v % n;
    }

    Rng substream(std::string_view name) const noexcept { return derived(fnv1a(name)); }
    Rng substream(std::uint64_t index) const noexcept { return derived(mix(index + 0x51ed270b27bd4315ULL)); }

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t counter() const noexcept { return counter_; }

    static constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        return h;
    }

private:
    static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

    static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    Rng derived(std::uint64_t salt) const noexcept {
        Rng r;
        r.key_     = mix(key_ ^ mix(salt + kGolden));
        r.counter_ = 0;
        return r;
    }

    std::uint64_t key_     = 0;
    std::uint64_t counter_ = 0;
};

} // namespace maskfuse
