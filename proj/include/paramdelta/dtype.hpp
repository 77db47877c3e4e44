#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace paramdelta {

/// Storage precisions a checkpoint file may carry. All arithmetic happens in
/// 32-bit working precision; 16-bit elements are upcast exactly on read and
/// rounded to nearest-even on write.
enum class DType : uint8_t { F32, F16, BF16 };

constexpr size_t byte_width(DType t) { return t == DType::F32 ? 4 : 2; }

/// File-format spelling ("F32", "F16", "BF16").
std::string_view dtype_name(DType t);

/// Parses the file-format spelling; throws MalformedHeader on anything else.
DType parse_dtype(std::string_view s);

// Canonical quiet-NaN bit patterns. Every NaN collapses to these on encode
// so identical inputs always produce identical output bytes.
inline constexpr uint16_t kCanonicalNanF16 = 0x7e00;
inline constexpr uint16_t kCanonicalNanBF16 = 0x7fc0;
inline constexpr uint32_t kCanonicalNanF32 = 0x7fc00000u;

// Scalar conversions. Upcasts are exact and keep NaN payloads; downcasts
// round to nearest, ties to even.
float f16_to_f32(uint16_t bits);
float bf16_to_f32(uint16_t bits);
uint16_t f32_to_f16(float value);
uint16_t f32_to_bf16(float value);

// Bulk codecs over little-endian raw bytes, used by the streaming I/O path.
void decode_to_f32(DType t, const uint8_t* src, size_t count, float* dst);
void encode_from_f32(DType t, const float* src, size_t count, uint8_t* dst);

} // namespace paramdelta
