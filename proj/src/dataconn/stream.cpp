#include "minihorn/dataconn/stream.hpp"

#include <sys/uio.h>

#include <array>
#include <cstring>

#include "minihorn/error.hpp"

namespace minihorn::dataconn {

FrameReader::FrameReader(const net::Socket& sock, std::size_t buffer_size) : sock_(sock), buf_(buffer_size) {}

std::optional<Message> FrameReader::next() {
    for (;;) {
        auto avail = std::span<const std::byte>(buf_.data() + begin_, end_ - begin_);
        if (avail.size() >= kHeaderSize) {
            const Header h = decode_header(avail.first<kHeaderSize>());
            const std::size_t total = kHeaderSize + h.payload_len;
            if (avail.size() >= total) {
                Message m{h.type, h.id, h.offset, h.length, {avail.begin() + kHeaderSize, avail.begin() + total}};
                begin_ += total;
                if (begin_ == end_) begin_ = end_ = 0;
                return m;
            }
            if (buf_.size() < total) buf_.resize(total);
        }
        if (end_ == buf_.size()) {
            std::memmove(buf_.data(), buf_.data() + begin_, end_ - begin_);
            end_ -= begin_;
            begin_ = 0;
        }
        const std::size_t n = sock_.recv_some(std::span<std::byte>(buf_.data() + end_, buf_.size() - end_));
        if (n == 0) {
            if (begin_ == end_) return std::nullopt;
            throw Error(Errc::io, "connection closed mid-frame");
        }
        end_ += n;
    }
}

void send_message(const net::Socket& sock, const Message& m) {
    const Header h = m.header();
    validate(h);
    std::array<std::byte, kHeaderSize> hdr;
    encode_header(h, hdr);
    std::array<iovec, 2> iov{{{hdr.data(), hdr.size()},
                              {const_cast<std::byte*>(m.payload.data()), m.payload.size()}}};
    sock.send_all(std::span<iovec>(iov.data(), m.payload.empty() ? 1 : 2));
}

}  // namespace minihorn::dataconn
