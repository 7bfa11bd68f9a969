#include <gtest/gtest.h>

#include <random>
#include <thread>

#include "minihorn/dataconn/message.hpp"
#include "minihorn/dataconn/stream.hpp"
#include "minihorn/error.hpp"
#include "minihorn/util/bytes.hpp"
#include "minihorn/util/socket.hpp"
#include "pattern.hpp"

using namespace minihorn;
using namespace minihorn::dataconn;
using minihorn::testing::pattern;

namespace {

// Hand-assembled reference encoding.
std::vector<std::byte> reference_frame(std::uint8_t type, std::uint32_t id, std::uint64_t offset,
                                       std::uint32_t length, std::span<const std::byte> payload) {
    std::vector<std::byte> out;
    auto put = [&](std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xff));
    };
    put(type, 1);
    put(id, 4);
    put(offset, 8);
    put(length, 4);
    put(payload.size(), 4);
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

}  // namespace

TEST(Message, PingFrame) {
    auto raw = encode(make_ping(7));
    EXPECT_EQ(raw.size(), 21u);
    EXPECT_EQ(raw, reference_frame(4, 7, 0, 0, {}));
    auto r = decode(raw);
    ASSERT_TRUE(r.message);
    EXPECT_EQ(r.consumed, 21u);
    EXPECT_EQ(*r.message, make_ping(7));
}

TEST(Message, WriteFrame) {
    auto data = pattern(4096, 3);
    auto m = make_write(9, 8192, data);
    auto raw = encode(m);
    EXPECT_EQ(raw.size(), 4117u);
    EXPECT_EQ(raw, reference_frame(2, 9, 8192, 4096, data));
    auto r = decode(raw);
    ASSERT_TRUE(r.message);
    EXPECT_EQ(r.message->offset, 8192u);
    EXPECT_EQ(r.message->length, 4096u);
    EXPECT_EQ(r.message->payload, data);
}

TEST(Message, UnknownTypeIsProtocolError) {
    auto raw = reference_frame(99, 1, 0, 0, {});
    try {
        decode(raw);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::protocol);
    }
}

TEST(Message, InconsistentPayloadRejected) {
    std::vector<std::byte> p(16);
    EXPECT_THROW(decode(reference_frame(1, 1, 0, 16, p)), Error);     // READ with payload
    EXPECT_THROW(decode(reference_frame(2, 1, 0, 32, p)), Error);     // WRITE length mismatch
    auto huge = reference_frame(2, 1, 0, kMaxPayload + 1, {});
    bytes::store_le<std::uint32_t>(huge.data() + 17, kMaxPayload + 1);
    EXPECT_THROW(decode(huge), Error);
}

TEST(Message, IncompleteFrameConsumesNothing) {
    auto raw = encode(make_write(1, 0, pattern(4096, 1)));
    for (std::size_t cut : {0u, 5u, 20u, 21u, 4000u, 4116u}) {
        auto r = decode(std::span(raw).first(cut));
        EXPECT_FALSE(r.message);
        EXPECT_EQ(r.consumed, 0u);
    }
}

TEST(Message, ConcatenatedFramesDecodeInOrder) {
    std::vector<Message> msgs = {make_ping(1), make_read(2, 4096, 8192), make_write(3, 0, pattern(512, 9)),
                                 make_unmap(4, 0, 4096), make_response(5, 0, pattern(100, 2)),
                                 make_error(6, "boom")};
    std::vector<std::byte> stream;
    for (const auto& m : msgs) {
        auto e = encode(m);
        stream.insert(stream.end(), e.begin(), e.end());
    }
    std::span<const std::byte> rest(stream);
    for (const auto& m : msgs) {
        auto r = decode(rest);
        ASSERT_TRUE(r.message);
        EXPECT_EQ(*r.message, m);
        rest = rest.subspan(r.consumed);
    }
    EXPECT_TRUE(rest.empty());
    EXPECT_EQ(msgs.back().error_text(), "boom");
}

TEST(Message, RandomRoundTrip) {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 2000; ++i) {
        Message m;
        switch (rng() % 6) {
            case 0: m = make_ping(static_cast<std::uint32_t>(rng())); break;
            case 1: m = make_read(static_cast<std::uint32_t>(rng()), rng(), rng() % (1 << 20)); break;
            case 2: m = make_write(static_cast<std::uint32_t>(rng()), rng(), pattern(rng() % 9000, rng())); break;
            case 3: m = make_unmap(static_cast<std::uint32_t>(rng()), rng(), static_cast<std::uint32_t>(rng())); break;
            case 4: m = make_response(static_cast<std::uint32_t>(rng()), rng(), pattern(rng() % 9000, 1)); break;
            default: m = make_error(static_cast<std::uint32_t>(rng()), "x"); break;
        }
        auto raw = encode(m);
        auto r = decode(raw);
        ASSERT_TRUE(r.message);
        EXPECT_EQ(*r.message, m);
        EXPECT_EQ(r.consumed, raw.size());
    }
}

TEST(Message, GarbageNeverCrashes) {
    std::mt19937_64 rng(8);
    for (int i = 0; i < 20000; ++i) {
        std::vector<std::byte> junk(rng() % 64);
        for (auto& b : junk) b = static_cast<std::byte>(rng());
        if (!junk.empty() && (rng() & 1)) junk[0] = static_cast<std::byte>(1 + rng() % 6);
        try {
            auto r = decode(junk);
            if (r.message) {
                EXPECT_LE(r.consumed, junk.size());
            }
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), Errc::protocol);
        }
    }
}

TEST(Stream, FramesOverSocket) {
    net::Listener listener(net::Endpoint{"127.0.0.1", 0});
    const std::uint16_t port = listener.port();
    std::vector<Message> msgs;
    for (std::uint32_t i = 0; i < 200; ++i) {
        msgs.push_back(i % 3 ? make_write(i, i * 4096ull, pattern(4096 * (1 + i % 7), i + 1))
                             : make_read(i, i * 4096ull, 4096));
    }
    msgs.push_back(make_write(999, 0, pattern(3u << 20, 77)));
    std::thread sender([&] {
        auto s = net::connect_tcp({"127.0.0.1", port});
        for (const auto& m : msgs) send_message(s, m);
    });
    auto conn = listener.accept();
    FrameReader reader(conn);
    for (const auto& m : msgs) {
        auto got = reader.next();
        ASSERT_TRUE(got);
        EXPECT_EQ(*got, m);
    }
    sender.join();
    EXPECT_FALSE(reader.next());
}

TEST(Stream, TruncatedFrameIsIoError) {
    net::Listener listener(net::Endpoint{"127.0.0.1", 0});
    const std::uint16_t port = listener.port();
    std::thread sender([&] {
        auto s = net::connect_tcp({"127.0.0.1", port});
        auto raw = encode(make_write(1, 0, pattern(4096, 1)));
        s.send_all(std::span<const std::byte>(raw).first(100));
    });
    auto conn = listener.accept();
    FrameReader reader(conn);
    sender.join();
    EXPECT_THROW(reader.next(), Error);
}
