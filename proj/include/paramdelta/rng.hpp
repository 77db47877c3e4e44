#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace paramdelta::rng {

inline constexpr uint64_t kGolden = 0x9e3779b97f4a7c15ull;

// splitmix64 finalizer
inline uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

/// Key for a named counter-based stream. Streams are stateless: element i is
/// a pure function of (key, i), so per-tensor data is independent of
/// generation order and identical on every platform.
inline uint64_t stream_key(uint64_t seed, std::string_view label) {
    return mix64(seed ^ fnv1a(label));
}

inline uint64_t stream_u64(uint64_t key, uint64_t i) {
    return mix64(key ^ mix64(i + kGolden));
}

/// Uniform draw from the dyadic grid {-1024, ..., 1023} / 1024. Grid values
/// are exact in f32 and f16, so sums and differences of generated tensors
/// stay exact in working precision.
inline float grid_value(uint64_t key, uint64_t i) {
    int32_t k = static_cast<int32_t>(stream_u64(key, i) >> 53) - 1024;
    return static_cast<float>(k) / 1024.0f;
}

inline double uniform01(uint64_t key, uint64_t i) {
    return static_cast<double>(stream_u64(key, i) >> 11) * 0x1.0p-53;
}

/// Standard-normal draw via Box-Muller on two stream elements.
inline double gaussian(uint64_t key, uint64_t i) {
    double u1 = uniform01(key, 2 * i);
    double u2 = uniform01(key, 2 * i + 1);
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

} // namespace paramdelta::rng
