#include "paramdelta/dtype.hpp"

#include <bit>
#include <cstring>

#include "paramdelta/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint codec assumes a little-endian host");

namespace paramdelta {

std::string_view dtype_name(DType t) {
    switch (t) {
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    }
    return "F32";
}

DType parse_dtype(std::string_view s) {
    if (s == "F32") return DType::F32;
    if (s == "F16") return DType::F16;
    if (s == "BF16") return DType::BF16;
    fail(ErrorClass::MalformedHeader, "unsupported dtype \"" + std::string(s) + "\"");
}

float f16_to_f32(uint16_t h) {
    uint32_t sign = static_cast<uint32_t>(h & 0x8000u) << 16;
    uint32_t exp = (h >> 10) & 0x1fu;
    uint32_t man = h & 0x3ffu;
    uint32_t bits;
    if (exp == 0) {
        if (man == 0) {
            bits = sign; // ±0
        } else {
            // subnormal: renormalize into the f32 exponent range
            uint32_t e = 0;
            while (!(man & 0x400u)) {
                man <<= 1;
                ++e;
            }
            bits = sign | ((113u - e) << 23) | ((man & 0x3ffu) << 13);
        }
    } else if (exp == 31) {
        bits = sign | 0x7f800000u | (man << 13); // inf / NaN, payload kept
    } else {
        bits = sign | ((exp + 112u) << 23) | (man << 13);
    }
    return std::bit_cast<float>(bits);
}

float bf16_to_f32(uint16_t h) {
    return std::bit_cast<float>(static_cast<uint32_t>(h) << 16);
}

uint16_t f32_to_f16(float value) {
    uint32_t x = std::bit_cast<uint32_t>(value);
    uint16_t sign = static_cast<uint16_t>((x >> 16) & 0x8000u);
    uint32_t abs = x & 0x7fffffffu;

    if (abs > 0x7f800000u) return kCanonicalNanF16;
    if (abs == 0x7f800000u) return sign | 0x7c00u;
    // everything at or above 2^16 rounds to infinity after mantissa rounding
    if (abs >= 0x47800000u) return sign | 0x7c00u;

    int32_t e = static_cast<int32_t>(abs >> 23) - 112; // f16 biased exponent
    uint32_t man = abs & 0x7fffffu;
    if (e >= 1) {
        // normal target: round 23-bit mantissa to 10 bits; the carry may bump
        // the exponent (up to and including the overflow-to-inf case)
        uint32_t packed = (static_cast<uint32_t>(e) << 23) | man;
        uint32_t lsb = (packed >> 13) & 1u;
        packed += 0xfffu + lsb;
        return sign | static_cast<uint16_t>(packed >> 13);
    }
    // subnormal target (or underflow to zero)
    int shift = 14 - e; // >= 14
    if (shift > 24) return sign;
    uint32_t full = 0x800000u | man;
    uint32_t kept = full >> shift;
    uint32_t rem = full & ((1u << shift) - 1u);
    uint32_t half = 1u << (shift - 1);
    if (rem > half || (rem == half && (kept & 1u))) ++kept;
    return sign | static_cast<uint16_t>(kept); // carry lands on the min normal
}

uint16_t f32_to_bf16(float value) {
    uint32_t x = std::bit_cast<uint32_t>(value);
    if ((x & 0x7fffffffu) > 0x7f800000u) return kCanonicalNanBF16;
    uint32_t lsb = (x >> 16) & 1u;
    x += 0x7fffu + lsb; // round to nearest even; overflow carries into inf
    return static_cast<uint16_t>(x >> 16);
}

void decode_to_f32(DType t, const uint8_t* src, size_t count, float* dst) {
    switch (t) {
    case DType::F32:
        std::memcpy(dst, src, count * 4);
        break;
    case DType::F16:
        for (size_t i = 0; i < count; ++i) {
            uint16_t h;
            std::memcpy(&h, src + 2 * i, 2);
            dst[i] = f16_to_f32(h);
        }
        break;
    case DType::BF16:
        for (size_t i = 0; i < count; ++i) {
            uint16_t h;
            std::memcpy(&h, src + 2 * i, 2);
            dst[i] = bf16_to_f32(h);
        }
        break;
    }
}

void encode_from_f32(DType t, const float* src, size_t count, uint8_t* dst) {
    switch (t) {
    case DType::F32:
        for (size_t i = 0; i < count; ++i) {
            uint32_t bits = std::bit_cast<uint32_t>(src[i]);
            if ((bits & 0x7fffffffu) > 0x7f800000u) bits = kCanonicalNanF32;
            std::memcpy(dst + 4 * i, &bits, 4);
        }
        break;
    case DType::F16:
        for (size_t i = 0; i < count; ++i) {
            uint16_t h = f32_to_f16(src[i]);
            std::memcpy(dst + 2 * i, &h, 2);
        }
        break;
    case DType::BF16:
        for (size_t i = 0; i < count; ++i) {
            uint16_t h = f32_to_bf16(src[i]);
            std::memcpy(dst + 2 * i, &h, 2);
        }
        break;
    }
}

} // namespace paramdelta
