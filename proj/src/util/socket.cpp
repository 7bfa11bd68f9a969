#include "minihorn/util/socket.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>

#include <fmt/format.h>

#include "minihorn/error.hpp"

namespace minihorn::net {

std::string Endpoint::to_string() const { return fmt::format("{}:{}", host, port); }

Endpoint parse_endpoint(const std::string& text) {
    auto colon = text.rfind(':');
    std::string host = colon == std::string::npos ? "" : text.substr(0, colon);
    std::string port_text = colon == std::string::npos ? text : text.substr(colon + 1);
    unsigned port = 0;
    auto [ptr, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
    if (ec != std::errc() || ptr != port_text.data() + port_text.size() || port > 65535) {
        throw Error(Errc::invalid_argument, fmt::format("bad address '{}', expected host:port", text));
    }
    if (host.empty()) host = "127.0.0.1";
    return {host, static_cast<std::uint16_t>(port)};
}

Socket& Socket::operator=(Socket&& o) noexcept {
    if (this != &o) {
        close();
        fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
}

Socket::~Socket() { close(); }

void Socket::shutdown() noexcept {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void Socket::close() noexcept {
    if (fd_ >= 0) ::close(std::exchange(fd_, -1));
}

void Socket::send_all(std::span<const std::byte> data) const {
    std::size_t done = 0;
    while (done < data.size()) {
        ssize_t n = ::send(fd_, data.data() + done, data.size() - done, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw_errno("send");
        }
        done += static_cast<std::size_t>(n);
    }
}

void Socket::send_all(std::span<iovec> iov) const {
    std::size_t first = 0;
    while (first < iov.size()) {
        msghdr msg{};
        msg.msg_iov = iov.data() + first;
        msg.msg_iovlen = std::min<std::size_t>(iov.size() - first, IOV_MAX);
        ssize_t n = ::sendmsg(fd_, &msg, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw_errno("sendmsg");
        }
        auto left = static_cast<std::size_t>(n);
        while (first < iov.size() && left >= iov[first].iov_len) {
            left -= iov[first].iov_len;
            ++first;
        }
        if (left > 0) {
            iov[first].iov_base = static_cast<char*>(iov[first].iov_base) + left;
            iov[first].iov_len -= left;
        }
    }
}

bool Socket::recv_exact(std::span<std::byte> out) const {
    std::size_t done = 0;
    while (done < out.size()) {
        ssize_t n = ::recv(fd_, out.data() + done, out.size() - done, 0);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw_errno("recv");
        }
        if (n == 0) {
            if (done == 0) return false;
            throw Error(Errc::io, "connection closed mid-message");
        }
        done += static_cast<std::size_t>(n);
    }
    return true;
}

std::size_t Socket::recv_some(std::span<std::byte> out) const {
    for (;;) {
        ssize_t n = ::recv(fd_, out.data(), out.size(), 0);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw_errno("recv");
        }
        return static_cast<std::size_t>(n);
    }
}

namespace {

addrinfo* resolve(const Endpoint& ep, bool passive) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    if (passive) hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    auto port = std::to_string(ep.port);
    int rc = ::getaddrinfo(ep.host.c_str(), port.c_str(), &hints, &res);
    if (rc != 0) {
        throw Error(Errc::invalid_argument, fmt::format("resolve {}: {}", ep.to_string(), ::gai_strerror(rc)));
    }
    return res;
}

void set_nodelay(int fd) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

}  // namespace

Socket connect_tcp(const Endpoint& ep) {
    addrinfo* res = resolve(ep, false);
    int last_errno = ECONNREFUSED;
    for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
        int fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
        if (fd < 0) {
            last_errno = errno;
            continue;
        }
        if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) {
            ::freeaddrinfo(res);
            set_nodelay(fd);
            return Socket(fd);
        }
        last_errno = errno;
        ::close(fd);
    }
    ::freeaddrinfo(res);
    throw_errno("connect " + ep.to_string(), last_errno);
}

Listener::Listener(const Endpoint& ep) : host_(ep.host) {
    addrinfo* res = resolve(ep, true);
    int last_errno = EADDRNOTAVAIL;
    for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
        int fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
        if (fd < 0) {
            last_errno = errno;
            continue;
        }
        int one = 1;
        ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        if (::bind(fd, ai->ai_addr, ai->ai_addrlen) == 0 && ::listen(fd, 128) == 0) {
            sock_ = Socket(fd);
            break;
        }
        last_errno = errno;
        ::close(fd);
    }
    ::freeaddrinfo(res);
    if (!sock_.valid()) throw_errno("listen " + ep.to_string(), last_errno);

    sockaddr_storage addr{};
    socklen_t len = sizeof(addr);
    ::getsockname(sock_.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
    if (addr.ss_family == AF_INET) {
        port_ = ntohs(reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
    } else {
        port_ = ntohs(reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port);
    }
}

Socket Listener::accept() {
    for (;;) {
        int fd = ::accept4(sock_.fd(), nullptr, nullptr, SOCK_CLOEXEC);
        if (fd >= 0) {
            set_nodelay(fd);
            return Socket(fd);
        }
        if (errno == EINTR || errno == ECONNABORTED) continue;
        return Socket();
    }
}

void Listener::shutdown() noexcept { sock_.shutdown(); }

}  // namespace minihorn::net
