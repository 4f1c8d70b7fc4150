#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace goskill::core {

// FNV-1a over arbitrary bytes. Used for parameter seeds, checkpoints
// checksums and artifact hashes in run manifests.
inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t seed = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), seed);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t buf[2] = {a, b};
    return fnv1a64(buf, sizeof(buf));
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
    uint64_t buf[3] = {a, b, c};
    return fnv1a64(buf, sizeof(buf));
}

// Deterministic RNG stream. One instance per training loop / episode;
// never shared across threads.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    double uniform(double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(engine_);
    }

    double normal(double mean, double std) {
        std::normal_distribution<double> d(mean, std);
        return d(engine_);
    }

    // Normal(0, std) re-sampled until within two standard deviations.
    double truncated_normal(double std) {
        for (;;) {
            const double x = normal(0.0, std);
            if (std::abs(x) <= 2.0 * std) return x;
        }
    }

    // Uniform integer in [0, n).
    size_t index(size_t n) {
        std::uniform_int_distribution<size_t> d(0, n - 1);
        return d(engine_);
    }

    uint64_t next_u64() { return engine_(); }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace goskill::core
