#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace t3po {

// FNV-1a, 64 bit. Used for golden-image checksums, config hashes and
// score-file fingerprints. Not cryptographic; collisions are irrelevant
// at the scales involved.
inline constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ull;
inline constexpr uint64_t kFnvPrime = 0x100000001b3ull;

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = kFnvOffset) {
    return fnv1a64(s.data(), s.size(), h);
}

inline std::string to_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

// splitmix64 finalizer; used to derive independent RNG streams from a
// base seed plus a stream tag.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    return mix64(seed ^ mix64(stream));
}

inline uint64_t mix_seed(uint64_t seed, std::string_view tag, uint64_t index = 0) {
    return mix_seed(seed, mix_seed(fnv1a64(tag), index));
}

}  // namespace t3po
