#include "replica_client.hpp"

#include <sys/uio.h>

#include <cstring>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "minihorn/dataconn/stream.hpp"
#include "minihorn/error.hpp"

namespace minihorn::controller {

using dataconn::Message;
using dataconn::MsgType;

namespace {
constexpr std::size_t kMaxBatch = 64;
}

// ---------------------------------------------------------------------------
// Connection

Connection::Connection(net::Socket sock, std::size_t replica, std::size_t index, const WireTap* tap)
    : sock_(std::move(sock)), replica_(replica), index_(index), tap_(tap) {}

Connection::~Connection() {
    shutdown();
    join();
}

void Connection::run(FrameHandler on_frame, FailureHandler on_failure) {
    on_frame_ = std::move(on_frame);
    on_failure_ = std::move(on_failure);
    sender_ = std::thread([this] { send_loop(); });
    receiver_ = std::thread([this] { recv_loop(); });
}

void Connection::send(const dataconn::Header& h, Payload payload) {
    Out out;
    dataconn::encode_header(h, out.header);
    out.payload = std::move(payload);
    if (tap_ && *tap_) (*tap_)(WireEvent{replica_, index_, true, h.type, h.id, h.offset, h.length});
    {
        std::lock_guard lk(mu_);
        if (closing_) return;
        queue_.push_back(std::move(out));
    }
    cv_.notify_one();
}

void Connection::send_loop() {
    std::vector<Out> batch;
    std::vector<iovec> iov;
    for (;;) {
        {
            std::unique_lock lk(mu_);
            cv_.wait(lk, [this] { return closing_ || !queue_.empty(); });
            if (closing_) return;
            while (!queue_.empty() && batch.size() < kMaxBatch) {
                batch.push_back(std::move(queue_.front()));
                queue_.pop_front();
            }
        }
        iov.clear();
        for (auto& o : batch) {
            iov.push_back({o.header.data(), o.header.size()});
            if (o.payload && !o.payload->empty()) {
                iov.push_back({const_cast<std::byte*>(o.payload->data()), o.payload->size()});
            }
        }
        try {
            sock_.send_all(std::span<iovec>(iov));
        } catch (const Error& e) {
            fail(fmt::format("send failed: {}", e.what()));
            return;
        }
        batch.clear();
    }
}

void Connection::recv_loop() {
    try {
        dataconn::FrameReader reader(sock_);
        while (auto m = reader.next()) {
            if (tap_ && *tap_) (*tap_)(WireEvent{replica_, index_, false, m->type, m->id, m->offset, m->length});
            on_frame_(std::move(*m));
        }
        fail("connection closed by replica");
    } catch (const Error& e) {
        fail(fmt::format("receive failed: {}", e.what()));
    }
}

void Connection::fail(const std::string& why) {
    {
        std::lock_guard lk(mu_);
        if (closing_) return;
    }
    on_failure_(why);
}

void Connection::shutdown() noexcept {
    {
        std::lock_guard lk(mu_);
        closing_ = true;
    }
    cv_.notify_all();
    sock_.shutdown();
}

void Connection::join() {
    if (sender_.joinable()) sender_.join();
    if (receiver_.joinable()) receiver_.join();
}

// ---------------------------------------------------------------------------
// ReplicaClient

ReplicaClient::ReplicaClient(std::size_t index, net::Endpoint address, const WireTap* tap)
    : index_(index), address_(std::move(address)), tap_(tap) {}

ReplicaClient::~ReplicaClient() = default;

void ReplicaClient::connect(std::size_t connections) {
    for (std::size_t i = 0; i < connections; ++i) {
        net::Socket s = net::connect_tcp(address_);
        dataconn::send_message(s, dataconn::make_ping(0));
        dataconn::FrameReader reader(s, 64);
        auto reply = reader.next();
        if (!reply || reply->type != MsgType::response || reply->id != 0) {
            throw Error(Errc::protocol, fmt::format("{}: bad PING handshake", address_.to_string()));
        }
        conns_.push_back(std::make_unique<Connection>(std::move(s), index_, i, tap_));
    }
    start_dispatch();
    for (auto& c : conns_) {
        c->run([this](Message&& m) { on_frame(std::move(m)); }, [this](const std::string& why) { mark_failed(why); });
    }
}

void ReplicaClient::mark_failed(const std::string& why) {
    {
        std::lock_guard lk(failure_mu_);
        if (failed_.load()) return;
        failure_ = why;
        failed_.store(true, std::memory_order_release);
    }
    if (why != "shutdown") spdlog::warn("replica {} marked failed: {}", address_.to_string(), why);
    for (auto& c : conns_) c->shutdown();
    fail_in_flight();
}

void ReplicaClient::shutdown() {
    mark_failed("shutdown");
    for (auto& c : conns_) c->join();
}

void ReplicaClient::send(std::uint32_t id, const PendingIo& io) {
    dataconn::Header h{io.type, id, io.offset, io.length, 0};
    if (io.type == MsgType::write) h.payload_len = io.length;
    count(io.type);
    const std::size_t c = next_conn_.fetch_add(1, std::memory_order_relaxed) % conns_.size();
    conns_[c]->send(h, io.payload);
}

void ReplicaClient::count(MsgType t) {
    switch (t) {
        case MsgType::read: reads_.fetch_add(1, std::memory_order_relaxed); break;
        case MsgType::write: writes_.fetch_add(1, std::memory_order_relaxed); break;
        case MsgType::unmap: unmaps_.fetch_add(1, std::memory_order_relaxed); break;
        default: break;
    }
}

void ReplicaClient::deliver(PendingIo& io, Message&& m) {
    if (m.type == MsgType::error) {
        io.complete(PendingIo::Outcome::remote_error, std::string(m.error_text()));
        return;
    }
    if (m.type != MsgType::response) {
        io.complete(PendingIo::Outcome::remote_error, fmt::format("unexpected {} frame", dataconn::to_string(m.type)));
        return;
    }
    if (io.type == MsgType::read) {
        if (m.payload.size() != io.read_out.size()) {
            io.complete(PendingIo::Outcome::remote_error,
                        fmt::format("read returned {} bytes, wanted {}", m.payload.size(), io.read_out.size()));
            return;
        }
        std::memcpy(io.read_out.data(), m.payload.data(), m.payload.size());
    }
    io.complete(PendingIo::Outcome::ok);
}

ReplicaStatus ReplicaClient::status() const {
    ReplicaStatus s;
    s.address = address_;
    s.health = healthy() ? Health::healthy : Health::failed;
    {
        std::lock_guard lk(failure_mu_);
        s.failure = failure_;
    }
    s.connections = conns_.size();
    s.reads = reads_.load();
    s.writes = writes_.load();
    s.unmaps = unmaps_.load();
    s.tokens_available = tokens_available();
    s.stray_responses = stray_.load();
    return s;
}

// ---------------------------------------------------------------------------
// Token strategy

TokenClient::TokenClient(std::size_t index, net::Endpoint address, const WireTap* tap, std::uint32_t capacity)
    : ReplicaClient(index, std::move(address), tap),
      pool_(capacity),
      slots_(std::make_unique<std::atomic<PendingIo*>[]>(capacity)) {}

void TokenClient::submit(PendingIo& io) {
    if (!healthy()) {
        io.complete(PendingIo::Outcome::transport, "replica failed");
        return;
    }
    auto id = pool_.acquire();
    if (!id) {
        io.complete(PendingIo::Outcome::transport, "replica failed");
        return;
    }
    io.token = *id;
    io.holds_token = true;
    slots_[*id].store(&io, std::memory_order_release);
    // A failure sweep may have run before the store above; take the slot back.
    if (!healthy()) {
        if (slots_[*id].exchange(nullptr, std::memory_order_acq_rel) == &io) {
            io.complete(PendingIo::Outcome::transport, "replica failed");
        }
        return;
    }
    send(*id, io);
}

void TokenClient::finish(PendingIo& io) {
    // Ids of requests failed by the sweep stay out of the pool: a late reply
    // for them must never match a newer request.
    if (io.holds_token && io.outcome != PendingIo::Outcome::transport) pool_.release(io.token);
    io.holds_token = false;
}

void TokenClient::on_frame(Message&& m) {
    if (m.id >= pool_.capacity()) {
        mark_failed(fmt::format("reply id {} outside capacity {}", m.id, pool_.capacity()));
        return;
    }
    PendingIo* io = slots_[m.id].exchange(nullptr, std::memory_order_acq_rel);
    if (io == nullptr) {
        stray_.fetch_add(1, std::memory_order_relaxed);
        return;
    }
    deliver(*io, std::move(m));
}

void TokenClient::fail_in_flight() {
    pool_.close();
    for (std::uint32_t i = 0; i < pool_.capacity(); ++i) {
        if (PendingIo* io = slots_[i].exchange(nullptr, std::memory_order_acq_rel)) {
            io->complete(PendingIo::Outcome::transport, failure_);
        }
    }
}

void TokenClient::shutdown() { ReplicaClient::shutdown(); }

// ---------------------------------------------------------------------------
// Legacy strategy

LegacyClient::LegacyClient(std::size_t index, net::Endpoint address, const WireTap* tap)
    : ReplicaClient(index, std::move(address), tap) {}

LegacyClient::~LegacyClient() {
    if (worker_.joinable()) {
        push(Stop{});
        worker_.join();
    }
}

void LegacyClient::start_dispatch() {
    worker_ = std::thread([this] { loop(); });
}

void LegacyClient::push(Event e) {
    {
        std::lock_guard lk(mu_);
        events_.push_back(std::move(e));
    }
    cv_.notify_one();
}

void LegacyClient::submit(PendingIo& io) {
    if (!healthy()) {
        io.complete(PendingIo::Outcome::transport, "replica failed");
        return;
    }
    push(Request{&io});
}

void LegacyClient::on_frame(Message&& m) { push(Response{std::move(m)}); }

void LegacyClient::fail_in_flight() { push(Failure{}); }

void LegacyClient::shutdown() {
    ReplicaClient::shutdown();
    if (worker_.joinable()) {
        push(Stop{});
        worker_.join();
    }
}

void LegacyClient::loop() {
    auto fail_all = [this] {
        for (auto& [id, io] : in_flight_) io->complete(PendingIo::Outcome::transport, "replica failed");
        in_flight_.clear();
    };
    for (;;) {
        Event e;
        {
            std::unique_lock lk(mu_);
            cv_.wait(lk, [this] { return !events_.empty(); });
            e = std::move(events_.front());
            events_.pop_front();
        }
        if (auto* r = std::get_if<Request>(&e)) {
            if (dead_) {
                r->io->complete(PendingIo::Outcome::transport, "replica failed");
                continue;
            }
            const std::uint32_t id = next_id_++;
            in_flight_[id] = r->io;
            send(id, *r->io);
        } else if (auto* resp = std::get_if<Response>(&e)) {
            auto it = in_flight_.find(resp->msg.id);
            if (it == in_flight_.end()) {
                stray_.fetch_add(1, std::memory_order_relaxed);
                continue;
            }
            PendingIo* io = it->second;
            in_flight_.erase(it);
            deliver(*io, std::move(resp->msg));
        } else if (std::holds_alternative<Failure>(e)) {
            dead_ = true;
            fail_all();
        } else {
            fail_all();
            // Drain requests that raced with shutdown.
            std::lock_guard lk(mu_);
            for (auto& ev : events_) {
                if (auto* r = std::get_if<Request>(&ev)) r->io->complete(PendingIo::Outcome::transport, "shutdown");
            }
            events_.clear();
            return;
        }
    }
}

}  // namespace minihorn::controller
