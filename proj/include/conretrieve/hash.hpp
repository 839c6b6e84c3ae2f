#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace conretrieve {

// FNV-1a, 64 bit. Used for content fingerprints and file checksums; these
// guard against accidental drift and corruption, not adversaries.
inline uint64_t fnv1a64(std::string_view bytes, uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

inline std::string content_fingerprint(std::string_view bytes) {
    return hex64(fnv1a64(bytes));
}

}  // namespace conretrieve
