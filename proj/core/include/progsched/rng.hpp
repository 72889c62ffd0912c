#pragma once

#include <cstdint>
#include <string_view>

namespace progsched {

// splitmix64 step; used for seed derivation and as the stream generator so
// draws are identical across standard library implementations.
constexpr std::uint64_t splitmix64(std::uint64_t& state) noexcept {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) noexcept {
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

    // Independent stream named by (seed, key, index).
    static Rng stream(std::uint64_t seed, std::string_view key, std::uint64_t index = 0) {
        std::uint64_t s = seed ^ fnv1a(key);
        splitmix64(s);
        s ^= index * 0xD1B54A32D192ED03ULL;
        splitmix64(s);
        return Rng(s);
    }

    std::uint64_t next() noexcept { return splitmix64(state_); }

    // Uniform in [0, 1).
    double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Uniform integer in [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) noexcept {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(next() % span);
    }

private:
    std::uint64_t state_;
};

}  // namespace progsched
