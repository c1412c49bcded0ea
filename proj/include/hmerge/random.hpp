#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace hmerge {

// Philox4x32-10 (Salmon et al., "Parallel random numbers: as easy as 1, 2, 3").
// Stateless: the output depends only on (counter, key).
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) noexcept {
    constexpr std::uint32_t kMul0 = 0xD2511F53u;
    constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
        const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
        const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
        ctr = {
            static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0],
            static_cast<std::uint32_t>(p1),
            static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1],
            static_cast<std::uint32_t>(p0),
        };
        key[0] += kWeyl0;
        key[1] += kWeyl1;
    }
    return ctr;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// 64-bit FNV-1a; stable across platforms, unlike std::hash.
constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

/// Uniform draws in [0,1) addressed by element index.
///
/// Keyed by (seed, tensor name, stream) so every element's draw is fixed
/// regardless of which thread visits which tensor in what order.
class KeyedUniform {
public:
    KeyedUniform(std::uint64_t seed, std::string_view tensor_name, std::uint32_t stream = 0) noexcept
        : stream_(stream) {
        const std::uint64_t k = splitmix64(seed ^ splitmix64(fnv1a64(tensor_name)));
        key_ = {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
    }

    /// Raw 32-bit word for element `index`.
    std::uint32_t bits(std::uint64_t index) const noexcept {
        return philox4x32({static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), stream_, 0u},
                          key_)[0];
    }

    /// Multiples of 2^-32 in [0,1).
    double operator()(std::uint64_t index) const noexcept {
        return static_cast<double>(bits(index)) * 0x1p-32;
    }

private:
    std::array<std::uint32_t, 2> key_{};
    std::uint32_t stream_;
};

} // namespace hmerge
