#include <array>
#include <cstring>

#include <fmt/format.h>

#include "minihorn/error.hpp"
#include "minihorn/frontend/nbd.hpp"
#include "minihorn/util/bytes.hpp"

namespace minihorn::nbd {

using bytes::load_be;
using bytes::store_be;

namespace {

void recv_or_throw(const net::Socket& s, std::span<std::byte> out) {
    if (!s.recv_exact(out)) throw Error(Errc::io, "nbd server closed the connection");
}

[[noreturn]] void throw_reply_error(Command cmd, std::uint64_t offset, std::uint32_t err) {
    const auto what = fmt::format("nbd command {} at offset {} failed with error {}", static_cast<unsigned>(cmd), offset, err);
    switch (err) {
        case kEINVAL: throw Error(Errc::invalid_argument, what);
        case kENOSPC: throw Error(Errc::no_space, what);
        default: throw Error(Errc::io, what);
    }
}

}  // namespace

// state bit 0: request bytes left (or were dropped); bit 1: reply consumed.
struct Client::Pending {
    std::span<std::byte> out;
    std::uint32_t error = 0;
    bool transport_failed = false;
    std::atomic<std::uint32_t> state{0};

    void replied() {
        state.fetch_or(2, std::memory_order_release);
        state.notify_all();
    }
    void wait() {
        for (auto s = state.load(std::memory_order_acquire); (s & 3) != 3; s = state.load(std::memory_order_acquire)) {
            state.wait(s);
        }
    }
};

std::unique_ptr<Client> Client::connect(const net::Endpoint& ep, const std::string& export_name) {
    net::Socket sock = net::connect_tcp(ep);

    std::array<std::byte, 18> greeting;
    recv_or_throw(sock, greeting);
    if (load_be<std::uint64_t>(greeting.data()) != kInitMagic || load_be<std::uint64_t>(greeting.data() + 8) != kOptMagic) {
        throw Error(Errc::protocol, "not an nbd newstyle server");
    }
    const auto sflags = load_be<std::uint16_t>(greeting.data() + 16);
    if (!(sflags & kFlagFixedNewstyle)) throw Error(Errc::protocol, "server does not speak fixed newstyle");
    std::array<std::byte, 4> cflags;
    store_be<std::uint32_t>(cflags.data(), kClientFixedNewstyle | ((sflags & kFlagNoZeroes) ? kClientNoZeroes : 0));
    sock.send_all(cflags);

    std::vector<std::byte> opt(16 + 4 + export_name.size() + 2 + 2);
    store_be<std::uint64_t>(opt.data(), kOptMagic);
    store_be<std::uint32_t>(opt.data() + 8, static_cast<std::uint32_t>(Option::go));
    store_be<std::uint32_t>(opt.data() + 12, static_cast<std::uint32_t>(opt.size() - 16));
    store_be<std::uint32_t>(opt.data() + 16, static_cast<std::uint32_t>(export_name.size()));
    std::memcpy(opt.data() + 20, export_name.data(), export_name.size());
    store_be<std::uint16_t>(opt.data() + 20 + export_name.size(), 1);
    store_be<std::uint16_t>(opt.data() + 22 + export_name.size(), kInfoBlockSize);
    sock.send_all(opt);

    ExportInfo info;
    bool have_export = false;
    for (;;) {
        std::array<std::byte, 20> hdr;
        recv_or_throw(sock, hdr);
        if (load_be<std::uint64_t>(hdr.data()) != kRepMagic) throw Error(Errc::protocol, "bad option reply magic");
        const auto type = load_be<std::uint32_t>(hdr.data() + 12);
        const auto len = load_be<std::uint32_t>(hdr.data() + 16);
        if (len > 64 * 1024) throw Error(Errc::protocol, "option reply too large");
        std::vector<std::byte> data(len);
        if (len) recv_or_throw(sock, data);
        if (type == kRepAck) break;
        if (type & 0x80000000u) {
            throw Error(type == kRepErrUnknown ? Errc::not_found : Errc::protocol,
                        fmt::format("export '{}' refused (reply {:#x})", export_name, type));
        }
        if (type != kRepInfo || len < 2) continue;
        const auto kind = load_be<std::uint16_t>(data.data());
        if (kind == kInfoExport && len >= 12) {
            info.size = load_be<std::uint64_t>(data.data() + 2);
            info.flags = load_be<std::uint16_t>(data.data() + 10);
            have_export = true;
        } else if (kind == kInfoBlockSize && len >= 14) {
            info.min_block = load_be<std::uint32_t>(data.data() + 2);
            info.preferred_block = load_be<std::uint32_t>(data.data() + 6);
            info.max_block = load_be<std::uint32_t>(data.data() + 10);
        }
    }
    if (!have_export) throw Error(Errc::protocol, "server acknowledged GO without export info");
    return std::unique_ptr<Client>(new Client(std::move(sock), info));
}

Client::Client(net::Socket sock, ExportInfo info) : sock_(std::move(sock)), info_(info) {
    receiver_ = std::thread([this] { receive_loop(); });
}

Client::~Client() { disconnect(); }

void Client::disconnect() {
    bool send_disc = false;
    {
        std::lock_guard lk(mu_);
        send_disc = !closed_;
    }
    if (send_disc) {
        net::OutMessage m;
        store_be<std::uint32_t>(m.head.data(), kRequestMagic);
        store_be<std::uint16_t>(m.head.data() + 6, static_cast<std::uint16_t>(Command::disc));
        m.head_len = 28;
        out_.post(std::move(m));
    }
    sock_.shutdown();
    if (receiver_.joinable()) receiver_.join();
}

void Client::fail_all(const std::string& why) {
    std::unordered_map<std::uint64_t, Pending*> victims;
    {
        std::lock_guard lk(mu_);
        if (failure_.empty()) failure_ = why;
        closed_ = true;
        victims.swap(pending_);
    }
    sock_.shutdown();
    for (auto& [handle, p] : victims) {
        p->transport_failed = true;
        p->replied();
    }
}

void Client::receive_loop() {
    try {
        net::BufferedReader in(sock_);
        std::array<std::byte, 16> hdr;
        while (in.read_exact(hdr)) {
            if (load_be<std::uint32_t>(hdr.data()) != kSimpleReplyMagic) throw Error(Errc::protocol, "bad reply magic");
            const auto err = load_be<std::uint32_t>(hdr.data() + 4);
            const auto handle = load_be<std::uint64_t>(hdr.data() + 8);
            Pending* p = nullptr;
            {
                std::lock_guard lk(mu_);
                auto it = pending_.find(handle);
                if (it != pending_.end()) {
                    p = it->second;
                    pending_.erase(it);
                }
            }
            if (!p) throw Error(Errc::protocol, fmt::format("reply for unknown handle {}", handle));
            p->error = err;
            if (err == 0 && !p->out.empty() && !in.read_exact(p->out)) throw Error(Errc::io, "eof in read reply");
            p->replied();
        }
        fail_all("nbd server closed the connection");
    } catch (const std::exception& e) {
        fail_all(e.what());
    }
}

std::uint32_t Client::command(Command cmd, std::uint64_t offset, std::uint32_t length,
                              std::span<const std::byte> payload, std::span<std::byte> out) {
    Pending p;
    if (cmd == Command::read) {
        if (out.size() < length) throw Error(Errc::invalid_argument, "read buffer shorter than the request");
        p.out = out.first(length);
    }
    std::uint64_t handle;
    {
        std::lock_guard lk(mu_);
        if (closed_) throw Error(Errc::io, fmt::format("nbd connection closed: {}", failure_));
        handle = next_handle_++;
        pending_.emplace(handle, &p);
    }
    net::OutMessage m;
    store_be<std::uint32_t>(m.head.data(), kRequestMagic);
    store_be<std::uint16_t>(m.head.data() + 6, static_cast<std::uint16_t>(cmd));
    store_be<std::uint64_t>(m.head.data() + 8, handle);
    store_be<std::uint64_t>(m.head.data() + 16, offset);
    store_be<std::uint32_t>(m.head.data() + 24, length);
    m.head_len = 28;
    m.body = payload;
    m.sent = &p.state;
    if (!out_.post(std::move(m))) fail_all("send failed");
    // The payload stays borrowed until bit 0 is up, so wait for both events.
    p.wait();
    if (p.transport_failed) {
        std::lock_guard lk(mu_);
        throw Error(Errc::io, fmt::format("nbd connection failed: {}", failure_));
    }
    return p.error;
}

void Client::read(std::uint64_t offset, std::span<std::byte> out) {
    const std::uint64_t chunk = info_.max_block / info_.min_block * info_.min_block;
    for (std::uint64_t done = 0; done < out.size() || out.empty(); done += chunk) {
        const auto n = static_cast<std::uint32_t>(std::min<std::uint64_t>(chunk, out.size() - done));
        if (auto err = command(Command::read, offset + done, n, {}, out.subspan(done, n))) {
            throw_reply_error(Command::read, offset + done, err);
        }
        if (out.empty()) break;
    }
}

void Client::write(std::uint64_t offset, std::span<const std::byte> data) {
    const std::uint64_t chunk = info_.max_block / info_.min_block * info_.min_block;
    for (std::uint64_t done = 0; done < data.size() || data.empty(); done += chunk) {
        const auto n = static_cast<std::uint32_t>(std::min<std::uint64_t>(chunk, data.size() - done));
        if (auto err = command(Command::write, offset + done, n, data.subspan(done, n))) {
            throw_reply_error(Command::write, offset + done, err);
        }
        if (data.empty()) break;
    }
}

void Client::unmap(std::uint64_t offset, std::uint64_t length) {
    const std::uint64_t chunk = std::uint64_t{0xffffffffu} / info_.min_block * info_.min_block;
    for (std::uint64_t done = 0; done < length || length == 0; done += chunk) {
        const auto n = static_cast<std::uint32_t>(std::min(chunk, length - done));
        if (auto err = command(Command::trim, offset + done, n)) throw_reply_error(Command::trim, offset + done, err);
        if (length == 0) break;
    }
}

void Client::flush() {
    if (auto err = command(Command::flush, 0, 0)) throw_reply_error(Command::flush, 0, err);
}

}  // namespace minihorn::nbd
