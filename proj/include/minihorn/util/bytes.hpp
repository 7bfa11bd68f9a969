#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <type_traits>

// Fixed-endian integer load/store over raw byte buffers.
namespace minihorn::bytes {

template <typename T>
constexpr T byteswap(T v) noexcept {
    static_assert(std::is_unsigned_v<T>);
    if constexpr (sizeof(T) == 1) {
        return v;
    } else if constexpr (sizeof(T) == 2) {
        return __builtin_bswap16(v);
    } else if constexpr (sizeof(T) == 4) {
        return __builtin_bswap32(v);
    } else {
        return __builtin_bswap64(v);
    }
}

template <typename T>
inline void store_le(std::byte* dst, T v) noexcept {
    if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
    std::memcpy(dst, &v, sizeof(T));
}

template <typename T>
inline T load_le(const std::byte* src) noexcept {
    T v;
    std::memcpy(&v, src, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
    return v;
}

template <typename T>
inline void store_be(std::byte* dst, T v) noexcept {
    if constexpr (std::endian::native == std::endian::little) v = byteswap(v);
    std::memcpy(dst, &v, sizeof(T));
}

template <typename T>
inline T load_be(const std::byte* src) noexcept {
    T v;
    std::memcpy(&v, src, sizeof(T));
    if constexpr (std::endian::native == std::endian::little) v = byteswap(v);
    return v;
}

constexpr std::uint64_t align_up(std::uint64_t v, std::uint64_t a) noexcept { return (v + a - 1) / a * a; }
constexpr std::uint64_t div_ceil(std::uint64_t v, std::uint64_t d) noexcept { return (v + d - 1) / d; }
constexpr bool is_pow2(std::uint64_t v) noexcept { return v != 0 && (v & (v - 1)) == 0; }

}  // namespace minihorn::bytes
