#pragma once

#include <cstdint>
#include <cstring>
#include <string>

#include "freeseg/tensor.hpp"

namespace freeseg {

// FNV-1a 64-bit. Used as a reproducibility fingerprint for parameters and
// artifacts (not a cryptographic hash).
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t hash_bytes(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

inline uint64_t hash_tensor(const Tensor& t, uint64_t h = 0xcbf29ce484222325ull) {
    for (int d : t.shape()) {
        const int64_t v = d;
        h = fnv1a64(&v, sizeof(v), h);
    }
    return fnv1a64(t.data(), static_cast<size_t>(t.size()) * sizeof(double), h);
}

inline std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

} // namespace freeseg
