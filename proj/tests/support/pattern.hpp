#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

namespace minihorn::testing {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Deterministic block content for a nonzero tag; tag 0 is the all-zero block.
inline void fill_block(std::span<std::byte> block, std::uint64_t tag) {
    if (tag == 0) {
        std::memset(block.data(), 0, block.size());
        return;
    }
    std::uint64_t s = splitmix64(tag);
    for (std::size_t i = 0; i + 8 <= block.size(); i += 8) {
        s = s * 6364136223846793005ull + 1442695040888963407ull;
        std::uint64_t w = s ^ tag;
        std::memcpy(block.data() + i, &w, 8);
    }
}

inline std::vector<std::byte> pattern(std::size_t size, std::uint64_t tag, std::size_t block = 4096) {
    std::vector<std::byte> out(size);
    for (std::size_t off = 0; off < size; off += block) {
        fill_block(std::span<std::byte>(out).subspan(off, std::min(block, size - off)), tag + off / block);
    }
    return out;
}

inline bool block_matches(std::span<const std::byte> block, std::uint64_t tag) {
    std::vector<std::byte> expect(block.size());
    fill_block(expect, tag);
    return std::memcmp(block.data(), expect.data(), block.size()) == 0;
}

}  // namespace minihorn::testing
