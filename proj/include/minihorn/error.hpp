#pragma once

#include <stdexcept>
#include <string>

namespace minihorn {

// Error classes shared by every layer. The CLI maps them onto process exit codes.
enum class Errc {
    invalid_argument,  // misaligned, out of range, malformed input
    not_found,
    conflict,          // duplicate names, exhausted slots, guard violations
    no_space,
    io,
    corrupt,           // on-disk structures fail validation
    protocol,          // wire framing violated; the connection must be dropped
    unavailable,       // no healthy replica left
};

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

const char* to_string(Errc code) noexcept;

// 0 ok, 2 usage, 3 not-found, 4 conflict/guard, 5 I/O
int exit_code(Errc code) noexcept;

[[noreturn]] void throw_errno(const std::string& what);
[[noreturn]] void throw_errno(const std::string& what, int err);

}  // namespace minihorn
