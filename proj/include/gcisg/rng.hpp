#pragma once

#include <cstdint>
#include <cmath>
#include <initializer_list>
#include <random>
#include <vector>

namespace gcisg::rng {

// splitmix64; used to fold arbitrary (seed, tag, index...) tuples into one
// well-mixed 64-bit stream seed so that every consumer gets an independent,
// reproducible engine.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t mix(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x2545f4914f6cdd1dull;
    for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p));
    return h;
}

inline std::mt19937_64 engine(std::uint64_t seed) { return std::mt19937_64(seed); }

inline std::mt19937_64 engine(std::initializer_list<std::uint64_t> parts) {
    return std::mt19937_64(mix(parts));
}

// Uniform in [0,1). Raw 53-bit mantissa draw; avoids std::uniform_real_distribution
// so the byte stream is identical across standard library implementations.
inline double canonical(std::mt19937_64& eng) {
    return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& eng, double lo, double hi) {
    return lo + (hi - lo) * canonical(eng);
}

inline std::uint64_t uniform_int(std::mt19937_64& eng, std::uint64_t n) {
    // modulo bias is < 2^-50 for desk-scale n; acceptable and deterministic
    return eng() % n;
}

// Box-Muller without the usual cached second value, so calls are stateless
// given the engine position.
inline double normal(std::mt19937_64& eng, double mean = 0.0, double stddev = 1.0) {
    double u1 = 0.0;
    do { u1 = canonical(eng); } while (u1 <= 0.0);
    const double u2 = canonical(eng);
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586477 * u2);
}

// Fisher-Yates with a pinned draw sequence; std::shuffle's draw order is
// implementation-defined, which would leak into the reproducibility contract.
template <typename T>
void shuffle(std::vector<T>& v, std::mt19937_64& eng) {
    for (std::size_t i = v.size(); i > 1; --i)
        std::swap(v[i - 1], v[uniform_int(eng, i)]);
}

}  // namespace gcisg::rng
