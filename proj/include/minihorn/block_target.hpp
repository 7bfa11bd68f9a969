#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace minihorn {

/// Anything that serves block I/O on a flat byte address space: backing stores,
/// the controller, an NBD client. Offsets and lengths must be block-aligned.
class BlockTarget {
public:
    virtual ~BlockTarget() = default;

    virtual std::uint64_t size() const = 0;
    virtual std::uint32_t block_size() const = 0;

    virtual void read(std::uint64_t offset, std::span<std::byte> out) = 0;
    virtual void write(std::uint64_t offset, std::span<const std::byte> data) = 0;
    virtual void unmap(std::uint64_t offset, std::uint64_t length) = 0;
    virtual void flush() {}
    /// True when requests finish without blocking, so a server may answer them
    /// on its reading thread instead of handing them to a worker pool.
    virtual bool completes_inline() const noexcept { return false; }
};

/// Throws Errc::invalid_argument unless [offset, offset+length) is block-aligned
/// and inside [0, size).
void check_block_range(std::uint64_t offset, std::uint64_t length, std::uint32_t block_size,
                       std::uint64_t size);

}  // namespace minihorn
