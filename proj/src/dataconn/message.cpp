#include "minihorn/dataconn/message.hpp"

#include <algorithm>
#include <cstring>

#include <fmt/format.h>

#include "minihorn/error.hpp"
#include "minihorn/util/bytes.hpp"

namespace minihorn::dataconn {

const char* to_string(MsgType type) noexcept {
    switch (type) {
        case MsgType::read: return "READ";
        case MsgType::write: return "WRITE";
        case MsgType::unmap: return "UNMAP";
        case MsgType::ping: return "PING";
        case MsgType::response: return "RESPONSE";
        case MsgType::error: return "ERROR";
    }
    return "?";
}

bool is_known_type(std::uint8_t raw) noexcept { return raw >= 1 && raw <= 6; }

bool carries_payload(MsgType type) noexcept {
    return type == MsgType::write || type == MsgType::response || type == MsgType::error;
}

Message make_ping(std::uint32_t id) { return {MsgType::ping, id, 0, 0, {}}; }

Message make_read(std::uint32_t id, std::uint64_t offset, std::uint32_t length) {
    return {MsgType::read, id, offset, length, {}};
}

Message make_write(std::uint32_t id, std::uint64_t offset, std::span<const std::byte> data) {
    return {MsgType::write, id, offset, static_cast<std::uint32_t>(data.size()), {data.begin(), data.end()}};
}

Message make_unmap(std::uint32_t id, std::uint64_t offset, std::uint32_t length) {
    return {MsgType::unmap, id, offset, length, {}};
}

Message make_response(std::uint32_t id, std::uint64_t offset, std::vector<std::byte> payload) {
    auto len = static_cast<std::uint32_t>(payload.size());
    return {MsgType::response, id, offset, len, std::move(payload)};
}

Message make_error(std::uint32_t id, std::string_view text) {
    auto* p = reinterpret_cast<const std::byte*>(text.data());
    return {MsgType::error, id, 0, static_cast<std::uint32_t>(text.size()), {p, p + text.size()}};
}

void validate(const Header& h) {
    if (h.payload_len > kMaxPayload) {
        throw Error(Errc::invalid_argument, fmt::format("payload of {} bytes exceeds the {} byte cap", h.payload_len,
                                                        kMaxPayload));
    }
    const std::uint32_t expected = carries_payload(h.type) ? h.length : 0;
    if (h.payload_len != expected) {
        throw Error(Errc::invalid_argument, fmt::format("{} frame: payload {} bytes does not match length {}",
                                                        to_string(h.type), h.payload_len, h.length));
    }
}

void encode_header(const Header& h, std::span<std::byte, kHeaderSize> out) noexcept {
    out[0] = static_cast<std::byte>(h.type);
    bytes::store_le<std::uint32_t>(out.data() + 1, h.id);
    bytes::store_le<std::uint64_t>(out.data() + 5, h.offset);
    bytes::store_le<std::uint32_t>(out.data() + 13, h.length);
    bytes::store_le<std::uint32_t>(out.data() + 17, h.payload_len);
}

Header decode_header(std::span<const std::byte, kHeaderSize> in) {
    const auto raw_type = static_cast<std::uint8_t>(in[0]);
    if (!is_known_type(raw_type)) {
        throw Error(Errc::protocol, fmt::format("unknown dataconn message type {}", raw_type));
    }
    Header h;
    h.type = static_cast<MsgType>(raw_type);
    h.id = bytes::load_le<std::uint32_t>(in.data() + 1);
    h.offset = bytes::load_le<std::uint64_t>(in.data() + 5);
    h.length = bytes::load_le<std::uint32_t>(in.data() + 13);
    h.payload_len = bytes::load_le<std::uint32_t>(in.data() + 17);
    try {
        validate(h);
    } catch (const Error& e) {
        throw Error(Errc::protocol, e.what());
    }
    return h;
}

std::vector<std::byte> encode(const Message& m) {
    const Header h = m.header();
    validate(h);
    std::vector<std::byte> out(kHeaderSize + m.payload.size());
    encode_header(h, std::span<std::byte, kHeaderSize>(out.data(), kHeaderSize));
    std::copy(m.payload.begin(), m.payload.end(), out.begin() + kHeaderSize);
    return out;
}

DecodeResult decode(std::span<const std::byte> buffer) {
    if (buffer.size() < kHeaderSize) return {};
    const Header h = decode_header(buffer.first<kHeaderSize>());
    const std::size_t total = kHeaderSize + h.payload_len;
    if (buffer.size() < total) return {};
    Message m{h.type, h.id, h.offset, h.length, {buffer.begin() + kHeaderSize, buffer.begin() + total}};
    return {std::move(m), total};
}

}  // namespace minihorn::dataconn
