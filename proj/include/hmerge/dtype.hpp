#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <string_view>

namespace hmerge {

enum class DType : std::uint8_t { BF16, F16, F32 };

constexpr std::size_t dtype_size(DType t) noexcept {
    return t == DType::F32 ? 4 : 2;
}

std::string_view dtype_name(DType t) noexcept;

// Accepts the archive tags "BF16", "F16", "F32". Throws Error(DType) otherwise.
DType parse_dtype(std::string_view tag);

// bfloat16 is the upper half of an IEEE binary32, so widening is a shift.
constexpr float bf16_bits_to_f32(std::uint16_t bits) noexcept {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

// Round-to-nearest-even on the upper 16 bits. NaNs keep sign and upper payload;
// the quiet bit is forced only when truncation would otherwise produce an infinity,
// so every BF16 pattern survives a round trip through F32.
constexpr std::uint16_t f32_to_bf16_bits(float value) noexcept {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
    if ((bits & 0x7FFFFFFFu) > 0x7F800000u) {
        const auto upper = static_cast<std::uint16_t>(bits >> 16);
        return (upper & 0x007Fu) ? upper : static_cast<std::uint16_t>(upper | 0x0040u);
    }
    const std::uint32_t bias = 0x7FFFu + ((bits >> 16) & 1u);
    return static_cast<std::uint16_t>((bits + bias) >> 16);
}

float f16_bits_to_f32(std::uint16_t bits) noexcept;
std::uint16_t f32_to_f16_bits(float value) noexcept;

} // namespace hmerge
