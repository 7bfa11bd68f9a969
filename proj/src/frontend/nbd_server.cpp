#include <array>
#include <cstring>
#include <semaphore>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "minihorn/error.hpp"
#include "minihorn/frontend/nbd.hpp"
#include "minihorn/util/bytes.hpp"
#include "minihorn/util/send_combiner.hpp"

namespace minihorn::nbd {

using bytes::load_be;
using bytes::store_be;

namespace {

constexpr std::uint32_t kMaxOptionLength = 64 * 1024;
constexpr std::uint16_t kTransmissionFlags = kTxHasFlags | kTxSendFlush | kTxSendTrim | kTxCanMultiConn;

std::uint32_t errno_for(const std::exception& e) {
    if (auto* err = dynamic_cast<const Error*>(&e)) {
        switch (err->code()) {
            case Errc::invalid_argument: return kEINVAL;
            case Errc::no_space: return kENOSPC;
            default: return kEIO;
        }
    }
    if (dynamic_cast<const std::bad_alloc*>(&e)) return kENOMEM;
    return kEIO;
}

}  // namespace

struct Server::Connection {
    Connection(net::Socket s, std::size_t max_in_flight)
        : sock(std::move(s)), slots(static_cast<std::ptrdiff_t>(max_in_flight)) {}

    void reply(std::uint64_t handle, std::uint32_t error, std::vector<std::byte> data = {}) {
        net::OutMessage m;
        store_be<std::uint32_t>(m.head.data(), kSimpleReplyMagic);
        store_be<std::uint32_t>(m.head.data() + 4, error);
        store_be<std::uint64_t>(m.head.data() + 8, handle);
        m.head_len = 16;
        m.owned = std::move(data);
        if (!out.post(std::move(m))) sock.shutdown();
    }

    void option_reply(std::uint32_t option, std::uint32_t type, std::span<const std::byte> data = {}) {
        std::vector<std::byte> buf(20 + data.size());
        store_be<std::uint64_t>(buf.data(), kRepMagic);
        store_be<std::uint32_t>(buf.data() + 8, option);
        store_be<std::uint32_t>(buf.data() + 12, type);
        store_be<std::uint32_t>(buf.data() + 16, static_cast<std::uint32_t>(data.size()));
        std::copy(data.begin(), data.end(), buf.begin() + 20);
        sock.send_all(buf);
    }

    void begin(bool is_write) {
        slots.acquire();
        std::lock_guard lk(mu);
        ++in_flight;
        if (is_write) ++writes_in_flight;
    }

    void end(bool is_write) {
        slots.release();
        std::lock_guard lk(mu);
        --in_flight;
        if (is_write) --writes_in_flight;
        idle.notify_all();
    }

    net::Socket sock;
    net::SendCombiner out{sock};
    std::counting_semaphore<> slots;
    std::mutex mu;
    std::condition_variable idle;
    std::size_t in_flight = 0;
    std::size_t writes_in_flight = 0;
    std::thread reader;
    std::atomic<bool> finished{false};
};

Server::Server(BlockTarget& target, const net::Endpoint& listen, ServerOptions options)
    : target_(target), options_(std::move(options)), listener_(listen), pool_(options_.workers) {
    acceptor_ = std::thread([this] { accept_loop(); });
}

Server::~Server() { stop(); }

void Server::stop() {
    std::list<std::shared_ptr<Connection>> conns;
    {
        std::lock_guard lk(mu_);
        if (stopped_) return;
        stopped_ = true;
    }
    listener_.shutdown();
    if (acceptor_.joinable()) acceptor_.join();
    {
        std::lock_guard lk(mu_);
        conns.swap(conns_);
    }
    for (auto& c : conns) c->sock.shutdown();
    for (auto& c : conns) {
        if (c->reader.joinable()) c->reader.join();
    }
    stopped_cv_.notify_all();
}

void Server::wait() {
    std::unique_lock lk(mu_);
    stopped_cv_.wait(lk, [this] { return stopped_; });
}

void Server::accept_loop() {
    for (;;) {
        net::Socket s = listener_.accept();
        if (!s.valid()) return;
        auto conn = std::make_shared<Connection>(std::move(s), options_.max_in_flight);
        connections_.fetch_add(1, std::memory_order_relaxed);
        std::lock_guard lk(mu_);
        if (stopped_) return;
        for (auto it = conns_.begin(); it != conns_.end();) {
            if ((*it)->finished) {
                (*it)->reader.join();
                it = conns_.erase(it);
            } else {
                ++it;
            }
        }
        conn->reader = std::thread([this, conn] { serve(conn); });
        conns_.push_back(conn);
    }
}

bool Server::negotiate(Connection& conn) {
    std::array<std::byte, 18> greeting;
    store_be<std::uint64_t>(greeting.data(), kInitMagic);
    store_be<std::uint64_t>(greeting.data() + 8, kOptMagic);
    store_be<std::uint16_t>(greeting.data() + 16, kFlagFixedNewstyle | kFlagNoZeroes);
    conn.sock.send_all(greeting);

    std::array<std::byte, 4> cflags;
    if (!conn.sock.recv_exact(cflags)) return false;
    const auto client_flags = load_be<std::uint32_t>(cflags.data());
    if (client_flags & ~(kClientFixedNewstyle | kClientNoZeroes)) {
        throw Error(Errc::protocol, fmt::format("unknown client flags {:#x}", client_flags));
    }
    const bool no_zeroes = client_flags & kClientNoZeroes;
    const std::uint64_t size = target_.size();
    const auto matches = [&](const std::string& name) { return name.empty() || name == options_.export_name; };

    for (;;) {
        std::array<std::byte, 16> hdr;
        if (!conn.sock.recv_exact(hdr)) return false;
        if (load_be<std::uint64_t>(hdr.data()) != kOptMagic) throw Error(Errc::protocol, "bad option magic");
        const auto option = load_be<std::uint32_t>(hdr.data() + 8);
        const auto len = load_be<std::uint32_t>(hdr.data() + 12);
        if (len > kMaxOptionLength) throw Error(Errc::protocol, fmt::format("option length {} too large", len));
        std::vector<std::byte> data(len);
        if (len && !conn.sock.recv_exact(data)) return false;

        switch (static_cast<Option>(option)) {
            case Option::export_name: {
                std::string name(reinterpret_cast<const char*>(data.data()), data.size());
                if (!matches(name)) throw Error(Errc::protocol, fmt::format("unknown export '{}'", name));
                std::vector<std::byte> out(no_zeroes ? 10 : 134, std::byte{0});
                store_be<std::uint64_t>(out.data(), size);
                store_be<std::uint16_t>(out.data() + 8, kTransmissionFlags);
                conn.sock.send_all(out);
                return true;
            }
            case Option::abort:
                conn.option_reply(option, kRepAck);
                return false;
            case Option::list: {
                if (len != 0) {
                    conn.option_reply(option, kRepErrInvalid);
                    break;
                }
                std::vector<std::byte> out(4 + options_.export_name.size());
                store_be<std::uint32_t>(out.data(), static_cast<std::uint32_t>(options_.export_name.size()));
                std::memcpy(out.data() + 4, options_.export_name.data(), options_.export_name.size());
                conn.option_reply(option, kRepServer, out);
                conn.option_reply(option, kRepAck);
                break;
            }
            case Option::info:
            case Option::go: {
                if (len < 6) {
                    conn.option_reply(option, kRepErrInvalid);
                    break;
                }
                const auto nlen = load_be<std::uint32_t>(data.data());
                if (std::uint64_t{nlen} + 6 > len) {
                    conn.option_reply(option, kRepErrInvalid);
                    break;
                }
                const auto nreq = load_be<std::uint16_t>(data.data() + 4 + nlen);
                if (std::uint64_t{nlen} + 6 + 2ull * nreq != len) {
                    conn.option_reply(option, kRepErrInvalid);
                    break;
                }
                std::string name(reinterpret_cast<const char*>(data.data() + 4), nlen);
                if (!matches(name)) {
                    conn.option_reply(option, kRepErrUnknown);
                    break;
                }
                bool want_block_size = false;
                for (std::uint16_t i = 0; i < nreq; ++i) {
                    want_block_size |= load_be<std::uint16_t>(data.data() + 6 + nlen + 2 * i) == kInfoBlockSize;
                }
                std::array<std::byte, 12> info;
                store_be<std::uint16_t>(info.data(), kInfoExport);
                store_be<std::uint64_t>(info.data() + 2, size);
                store_be<std::uint16_t>(info.data() + 10, kTransmissionFlags);
                conn.option_reply(option, kRepInfo, info);
                if (want_block_size) {
                    std::array<std::byte, 14> bsz;
                    store_be<std::uint16_t>(bsz.data(), kInfoBlockSize);
                    store_be<std::uint32_t>(bsz.data() + 2, target_.block_size());
                    store_be<std::uint32_t>(bsz.data() + 6, std::max<std::uint32_t>(target_.block_size(), 4096));
                    store_be<std::uint32_t>(bsz.data() + 10, kMaxRequest);
                    conn.option_reply(option, kRepInfo, bsz);
                }
                conn.option_reply(option, kRepAck);
                if (static_cast<Option>(option) == Option::go) return true;
                break;
            }
            default:
                conn.option_reply(option, kRepErrUnsup);
                break;
        }
    }
}

void Server::serve(const std::shared_ptr<Connection>& conn) {
    try {
        if (negotiate(*conn)) {
            net::BufferedReader in(conn->sock);
            const bool run_inline = target_.completes_inline();
            std::array<std::byte, 28> hdr;
            while (in.read_exact(hdr)) {
                if (load_be<std::uint32_t>(hdr.data()) != kRequestMagic) throw Error(Errc::protocol, "bad request magic");
                const auto type = load_be<std::uint16_t>(hdr.data() + 6);
                const auto handle = load_be<std::uint64_t>(hdr.data() + 8);
                const auto offset = load_be<std::uint64_t>(hdr.data() + 16);
                const auto length = load_be<std::uint32_t>(hdr.data() + 24);
                const auto cmd = static_cast<Command>(type);
                commands_.fetch_add(1, std::memory_order_relaxed);

                if (cmd == Command::disc) break;
                if (cmd == Command::flush) {
                    // Nothing after the flush has been read yet, so draining the
                    // writes in flight covers every write before it.
                    std::uint32_t err = 0;
                    {
                        std::unique_lock lk(conn->mu);
                        conn->idle.wait(lk, [&] { return conn->writes_in_flight == 0; });
                    }
                    try {
                        target_.flush();
                    } catch (const std::exception& e) {
                        err = errno_for(e);
                    }
                    if (err) error_replies_.fetch_add(1, std::memory_order_relaxed);
                    conn->reply(handle, err);
                    continue;
                }

                std::vector<std::byte> payload;
                if (cmd == Command::write) {
                    if (length > kMaxRequest) {
                        std::array<std::byte, 64 * 1024> sink;
                        for (std::uint32_t left = length; left > 0;) {
                            const auto n = std::min<std::size_t>(left, sink.size());
                            if (!in.read_exact(std::span(sink.data(), n))) throw Error(Errc::io, "eof in write payload");
                            left -= static_cast<std::uint32_t>(n);
                        }
                        error_replies_.fetch_add(1, std::memory_order_relaxed);
                        conn->reply(handle, kEINVAL);
                        continue;
                    }
                    payload.resize(length);
                    if (length && !in.read_exact(payload)) throw Error(Errc::io, "eof in write payload");
                }
                if (run_inline) {
                    execute(*conn, cmd, handle, offset, length, std::move(payload));
                    continue;
                }
                const bool mutates = cmd == Command::write || cmd == Command::trim;
                conn->begin(mutates);
                pool_.post([this, conn, cmd, handle, offset, length, mutates, p = std::move(payload)]() mutable {
                    execute(*conn, cmd, handle, offset, length, std::move(p));
                    conn->end(mutates);
                });
            }
        }
    } catch (const Error& e) {
        if (e.code() == Errc::protocol) {
            protocol_errors_.fetch_add(1, std::memory_order_relaxed);
            spdlog::warn("nbd: dropping client: {}", e.what());
        }
    }
    conn->sock.shutdown();
    {
        std::unique_lock lk(conn->mu);
        conn->idle.wait(lk, [&] { return conn->in_flight == 0; });
    }
    conn->finished = true;
}

void Server::execute(Connection& conn, Command cmd, std::uint64_t handle, std::uint64_t offset,
                     std::uint32_t length, std::vector<std::byte> payload) {
    std::uint32_t err = 0;
    std::vector<std::byte> data;
    try {
        switch (cmd) {
            case Command::read:
                if (length > kMaxRequest) throw Error(Errc::invalid_argument, "read too large");
                check_block_range(offset, length, target_.block_size(), target_.size());
                data.resize(length);
                if (length) target_.read(offset, data);
                break;
            case Command::write:
                check_block_range(offset, length, target_.block_size(), target_.size());
                if (length) target_.write(offset, payload);
                break;
            case Command::trim:
                check_block_range(offset, length, target_.block_size(), target_.size());
                if (length) target_.unmap(offset, length);
                break;
            default:
                throw Error(Errc::invalid_argument, fmt::format("unsupported command {}", static_cast<unsigned>(cmd)));
        }
    } catch (const std::exception& e) {
        err = errno_for(e);
    }
    if (err) {
        error_replies_.fetch_add(1, std::memory_order_relaxed);
        conn.reply(handle, err);
    } else {
        conn.reply(handle, 0, std::move(data));
    }
}

ServerStats Server::stats() const noexcept {
    return {connections_.load(), commands_.load(), error_replies_.load(), protocol_errors_.load()};
}

std::size_t Server::open_connections() const {
    std::lock_guard lk(mu_);
    std::size_t n = 0;
    for (const auto& c : conns_) n += c->finished ? 0 : 1;
    return n;
}

}  // namespace minihorn::nbd
