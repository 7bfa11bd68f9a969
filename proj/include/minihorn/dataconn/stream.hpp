#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "minihorn/dataconn/message.hpp"
#include "minihorn/util/socket.hpp"

namespace minihorn::dataconn {

/// Buffered frame reader bound to one connection. Blocks until a whole frame
/// is available.
class FrameReader {
public:
    explicit FrameReader(const net::Socket& sock, std::size_t buffer_size = 256 * 1024);

    /// Next frame; std::nullopt on orderly EOF at a frame boundary. Throws
    /// Errc::protocol on malformed frames and Errc::io on truncation.
    std::optional<Message> next();

private:
    const net::Socket& sock_;
    std::vector<std::byte> buf_;
    std::size_t begin_ = 0;
    std::size_t end_ = 0;
};

/// Writes one frame with a single gathered send.
void send_message(const net::Socket& sock, const Message& m);

}  // namespace minihorn::dataconn
