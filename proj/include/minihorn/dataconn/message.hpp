#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// Controller <-> replica request/response framing.
//
// Every frame is a 21-byte little-endian header followed by payload_len bytes:
//
//   u8 msg_type | u32 id | u64 offset | u32 length | u32 payload_len
//
// WRITE, RESPONSE and ERROR carry payload_len == length (READ data travels in
// the RESPONSE; ERROR carries UTF-8 text). READ, UNMAP and PING carry none.
namespace minihorn::dataconn {

enum class MsgType : std::uint8_t {
    read = 1,
    write = 2,
    unmap = 3,
    ping = 4,
    response = 5,
    error = 6,
};

inline constexpr std::size_t kHeaderSize = 21;
inline constexpr std::uint32_t kMaxPayload = 16u << 20;

const char* to_string(MsgType type) noexcept;
bool is_known_type(std::uint8_t raw) noexcept;
/// True for the types whose payload_len must equal length.
bool carries_payload(MsgType type) noexcept;

struct Header {
    MsgType type = MsgType::ping;
    std::uint32_t id = 0;
    std::uint64_t offset = 0;
    std::uint32_t length = 0;
    std::uint32_t payload_len = 0;

    bool operator==(const Header&) const = default;
};

struct Message {
    MsgType type = MsgType::ping;
    std::uint32_t id = 0;
    std::uint64_t offset = 0;
    std::uint32_t length = 0;
    std::vector<std::byte> payload;

    Header header() const noexcept {
        return {type, id, offset, length, static_cast<std::uint32_t>(payload.size())};
    }
    std::string_view error_text() const noexcept {
        return {reinterpret_cast<const char*>(payload.data()), payload.size()};
    }

    bool operator==(const Message&) const = default;
};

Message make_ping(std::uint32_t id);
Message make_read(std::uint32_t id, std::uint64_t offset, std::uint32_t length);
Message make_write(std::uint32_t id, std::uint64_t offset, std::span<const std::byte> data);
Message make_unmap(std::uint32_t id, std::uint64_t offset, std::uint32_t length);
Message make_response(std::uint32_t id, std::uint64_t offset, std::vector<std::byte> payload = {});
Message make_error(std::uint32_t id, std::string_view text);

/// Throws Errc::invalid_argument when the payload disagrees with the type/length rules.
void validate(const Header& h);

void encode_header(const Header& h, std::span<std::byte, kHeaderSize> out) noexcept;
/// Throws Errc::protocol for unknown types, oversized or inconsistent payloads.
Header decode_header(std::span<const std::byte, kHeaderSize> in);

std::vector<std::byte> encode(const Message& m);

struct DecodeResult {
    std::optional<Message> message;  // empty: need more bytes
    std::size_t consumed = 0;
};

/// Decodes the first frame in `buffer`. Never reads past the frame it returns;
/// a prefix shorter than one frame yields {nullopt, 0}.
DecodeResult decode(std::span<const std::byte> buffer);

}  // namespace minihorn::dataconn
