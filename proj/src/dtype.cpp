#include "hmerge/dtype.hpp"

#include "hmerge/error.hpp"

#include <cmath>
#include <string>

namespace hmerge {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Format:        return "format error";
        case ErrorKind::MissingShard:  return "missing shard";
        case ErrorKind::Conflict:      return "conflict";
        case ErrorKind::Io:            return "I/O error";
        case ErrorKind::DType:         return "dtype error";
        case ErrorKind::Compatibility: return "compatibility error";
        case ErrorKind::Parameter:     return "parameter error";
        case ErrorKind::Layout:        return "layout error";
        case ErrorKind::Recipe:        return "recipe error";
    }
    return "error";
}

std::string_view dtype_name(DType t) noexcept {
    switch (t) {
        case DType::BF16: return "BF16";
        case DType::F16:  return "F16";
        case DType::F32:  return "F32";
    }
    return "?";
}

DType parse_dtype(std::string_view tag) {
    if (tag == "BF16") return DType::BF16;
    if (tag == "F16")  return DType::F16;
    if (tag == "F32")  return DType::F32;
    throw Error(ErrorKind::DType, "unsupported dtype tag '" + std::string(tag) + "'");
}

float f16_bits_to_f32(std::uint16_t h) noexcept {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp  = (h >> 10) & 0x1Fu;
    const std::uint32_t mant = h & 0x3FFu;
    if (exp == 0) {
        const float mag = std::ldexp(static_cast<float>(mant), -24);
        return sign ? -mag : mag;
    }
    if (exp == 31) {
        return std::bit_cast<float>(sign | 0x7F800000u | (mant << 13));
    }
    return std::bit_cast<float>(sign | ((exp + 112) << 23) | (mant << 13));
}

std::uint16_t f32_to_f16_bits(float value) noexcept {
    const std::uint32_t x    = std::bit_cast<std::uint32_t>(value);
    const std::uint32_t sign = (x >> 16) & 0x8000u;
    const std::uint32_t absx = x & 0x7FFFFFFFu;

    if (absx >= 0x7F800000u) {
        const std::uint32_t nan_bits = absx > 0x7F800000u ? (0x200u | ((absx >> 13) & 0x3FFu)) : 0u;
        return static_cast<std::uint16_t>(sign | 0x7C00u | nan_bits);
    }
    // 65520 and above round to infinity
    if (absx >= 0x477FF000u) {
        return static_cast<std::uint16_t>(sign | 0x7C00u);
    }

    auto round_shift = [](std::uint32_t m, std::uint32_t s) {
        std::uint32_t r         = m >> s;
        const std::uint32_t rem = m & ((1u << s) - 1u);
        const std::uint32_t half = 1u << (s - 1);
        if (rem > half || (rem == half && (r & 1u))) {
            ++r;
        }
        return r;
    };

    const std::uint32_t e = absx >> 23;
    if (absx < 0x38800000u) {
        // subnormal half; 2^-25 and below round to zero
        if (absx <= 0x33000000u) {
            return static_cast<std::uint16_t>(sign);
        }
        const std::uint32_t m = (absx & 0x7FFFFFu) | 0x800000u;
        return static_cast<std::uint16_t>(sign | round_shift(m, 126 - e));
    }
    const std::uint32_t r = ((e - 112) << 10 << 13 | (absx & 0x7FFFFFu));
    return static_cast<std::uint16_t>(sign | round_shift(r, 13));
}

} // namespace hmerge
