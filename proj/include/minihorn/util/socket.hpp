#pragma once

#include <sys/uio.h>

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>

namespace minihorn::net {

struct Endpoint {
    std::string host;
    std::uint16_t port = 0;

    std::string to_string() const;
};

/// Parses "host:port"; a bare ":port" or "port" binds to 127.0.0.1.
Endpoint parse_endpoint(const std::string& text);

/// Owning TCP socket descriptor.
class Socket {
public:
    Socket() = default;
    explicit Socket(int fd) noexcept : fd_(fd) {}
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;
    Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    Socket& operator=(Socket&& o) noexcept;
    ~Socket();

    int fd() const noexcept { return fd_; }
    bool valid() const noexcept { return fd_ >= 0; }

    /// Wakes any thread blocked in recv/send/accept on this socket.
    void shutdown() noexcept;
    void close() noexcept;

    void send_all(std::span<const std::byte> data) const;
    /// Sends every iovec fully; the array is modified in place.
    void send_all(std::span<iovec> iov) const;
    /// Returns false on orderly EOF before any byte; throws on EOF mid-buffer.
    bool recv_exact(std::span<std::byte> out) const;
    /// Single recv; 0 on EOF.
    std::size_t recv_some(std::span<std::byte> out) const;

private:
    int fd_ = -1;
};

Socket connect_tcp(const Endpoint& ep);

class Listener {
public:
    explicit Listener(const Endpoint& ep);

    /// Blocks; returns an invalid socket once shutdown() was called.
    Socket accept();
    void shutdown() noexcept;
    std::uint16_t port() const noexcept { return port_; }
    const std::string& host() const noexcept { return host_; }

private:
    Socket sock_;
    std::string host_;
    std::uint16_t port_ = 0;
};

}  // namespace minihorn::net
