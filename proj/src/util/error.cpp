#include "minihorn/error.hpp"

#include <cerrno>
#include <cstring>

#include <fmt/format.h>

#include "minihorn/block_target.hpp"

namespace minihorn {

const char* to_string(Errc code) noexcept {
    switch (code) {
        case Errc::invalid_argument: return "invalid argument";
        case Errc::not_found: return "not found";
        case Errc::conflict: return "conflict";
        case Errc::no_space: return "no space";
        case Errc::io: return "I/O error";
        case Errc::corrupt: return "corrupt metadata";
        case Errc::protocol: return "protocol error";
        case Errc::unavailable: return "unavailable";
    }
    return "unknown";
}

int exit_code(Errc code) noexcept {
    switch (code) {
        case Errc::invalid_argument: return 2;
        case Errc::not_found: return 3;
        case Errc::conflict: return 4;
        case Errc::no_space:
        case Errc::io:
        case Errc::corrupt:
        case Errc::protocol:
        case Errc::unavailable: return 5;
    }
    return 5;
}

void throw_errno(const std::string& what) { throw_errno(what, errno); }

void throw_errno(const std::string& what, int err) {
    throw Error(Errc::io, fmt::format("{}: {}", what, std::strerror(err)));
}

void check_block_range(std::uint64_t offset, std::uint64_t length, std::uint32_t block_size,
                       std::uint64_t size) {
    if (offset % block_size != 0 || length % block_size != 0) {
        throw Error(Errc::invalid_argument,
                    fmt::format("unaligned I/O: offset {} length {} (block size {})", offset, length, block_size));
    }
    if (offset > size || length > size - offset) {
        throw Error(Errc::invalid_argument,
                    fmt::format("I/O out of range: offset {} length {} (size {})", offset, length, size));
    }
}

}  // namespace minihorn
