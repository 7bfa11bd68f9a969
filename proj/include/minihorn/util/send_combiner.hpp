#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <mutex>
#include <span>
#include <vector>

#include "minihorn/util/socket.hpp"

namespace minihorn::net {

/// Reads exact-sized records through a user-space buffer so that a burst of
/// small frames costs one recv instead of one per frame.
class BufferedReader {
public:
    explicit BufferedReader(const Socket& sock, std::size_t capacity = 256 * 1024) : sock_(sock), buf_(capacity) {}

    /// Same contract as Socket::recv_exact.
    bool read_exact(std::span<std::byte> out);

private:
    const Socket& sock_;
    std::vector<std::byte> buf_;
    std::size_t head_ = 0;
    std::size_t tail_ = 0;
};

/// Message queued for sending: a short header, then a body that is either
/// borrowed or owned. `sent`, when set, gets bit 0 raised (and a notify) once
/// the bytes have left or the socket failed.
struct OutMessage {
    std::array<std::byte, 32> head{};
    std::uint8_t head_len = 0;
    std::span<const std::byte> body;
    std::vector<std::byte> owned;
    std::atomic<std::uint32_t>* sent = nullptr;
};

/// Flat-combining writer: whoever finds the socket idle sends everything that
/// has queued up in one sendmsg, including other threads' messages.
class SendCombiner {
public:
    explicit SendCombiner(const Socket& sock) : sock_(sock) {}

    /// Returns false once the socket has failed; the message is then dropped.
    bool post(OutMessage&& m);
    bool failed() const;

private:
    static void mark_sent(OutMessage& m);

    const Socket& sock_;
    mutable std::mutex mu_;
    std::vector<OutMessage> queue_;
    bool sending_ = false;
    bool failed_ = false;
};

}  // namespace minihorn::net
