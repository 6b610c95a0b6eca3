#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>

#include "nanmerge/errors.hpp"

namespace nanmerge {

enum class DType : uint8_t { F16, BF16, F32, F64 };

inline std::size_t byte_width(DType d) {
    switch (d) {
        case DType::F16:
        case DType::BF16: return 2;
        case DType::F32: return 4;
        case DType::F64: return 8;
    }
    return 0;
}

inline const char* dtype_name(DType d) {
    switch (d) {
        case DType::F16: return "F16";
        case DType::BF16: return "BF16";
        case DType::F32: return "F32";
        case DType::F64: return "F64";
    }
    return "?";
}

inline bool dtype_from_name(const std::string& s, DType& out) {
    if (s == "F16") { out = DType::F16; return true; }
    if (s == "BF16") { out = DType::BF16; return true; }
    if (s == "F32") { out = DType::F32; return true; }
    if (s == "F64") { out = DType::F64; return true; }
    return false;
}

inline float f32_from_bits(uint32_t b) {
    float f;
    std::memcpy(&f, &b, 4);
    return f;
}

inline uint32_t bits_from_f32(float f) {
    uint32_t b;
    std::memcpy(&b, &f, 4);
    return b;
}

// IEEE 754 binary16 -> binary32, exact.
inline float decode_f16(uint16_t h) {
    uint32_t sign = uint32_t(h >> 15) << 31;
    uint32_t exp = (h >> 10) & 0x1F;
    uint32_t mant = h & 0x3FF;
    if (exp == 0) {
        if (mant == 0) return f32_from_bits(sign);
        // subnormal: value = mant * 2^-24
        float v = std::ldexp(float(mant), -24);
        return sign ? -v : v;
    }
    if (exp == 31) {
        return f32_from_bits(sign | 0x7F800000u | (mant << 13));
    }
    return f32_from_bits(sign | ((exp + 112) << 23) | (mant << 13));
}

// binary32 -> binary16, round to nearest even. May produce inf on overflow;
// callers that forbid overflow must check.
inline uint16_t encode_f16(float f) {
    uint32_t x = bits_from_f32(f);
    uint32_t sign = (x >> 16) & 0x8000u;
    x &= 0x7FFFFFFFu;
    if (x >= 0x7F800000u) {  // inf / nan
        uint16_t mant = (x > 0x7F800000u) ? 0x200 : 0;
        return uint16_t(sign | 0x7C00u | mant);
    }
    int32_t e = int32_t(x >> 23) - 127;
    if (e < -25) return uint16_t(sign);  // below half the smallest subnormal
    uint32_t half_exp;
    uint32_t mant;
    int shift;
    if (e < -14) {  // subnormal half, implicit bit becomes explicit
        half_exp = 0;
        mant = (x & 0x7FFFFFu) | 0x800000u;
        shift = 13 + (-14 - e);
    } else {
        half_exp = uint32_t(e + 15) << 10;
        mant = x & 0x7FFFFFu;
        shift = 13;
    }
    uint32_t kept = mant >> shift;
    uint32_t rem = mant & ((1u << shift) - 1);
    uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (kept & 1u))) kept++;
    uint32_t out = half_exp + kept;  // mantissa carry bumps the exponent
    if (out >= 0x7C00u) out = 0x7C00u;  // rounded past max -> inf
    return uint16_t(sign | out);
}

inline float decode_bf16(uint16_t h) {
    return f32_from_bits(uint32_t(h) << 16);
}

// binary32 -> bfloat16, round to nearest even.
inline uint16_t encode_bf16(float f) {
    uint32_t x = bits_from_f32(f);
    if ((x & 0x7F800000u) == 0x7F800000u && (x & 0x7FFFFFu) != 0) {
        return uint16_t((x >> 16) | 0x40);  // quiet the nan
    }
    uint32_t lsb = (x >> 16) & 1u;
    x += 0x7FFFu + lsb;
    return uint16_t(x >> 16);
}

// Largest finite magnitudes per storage type, for overflow checks on narrowing.
inline double dtype_finite_max(DType d) {
    switch (d) {
        case DType::F16: return 65504.0;
        case DType::BF16: return double(decode_bf16(0x7F7F));
        case DType::F32: return 3.4028234663852886e38;
        case DType::F64: return 1.7976931348623157e308;
    }
    return 0.0;
}

}  // namespace nanmerge
