#include "minihorn/replica/server.hpp"

#include <semaphore>

#include <spdlog/spdlog.h>

#include "minihorn/dataconn/message.hpp"
#include "minihorn/dataconn/stream.hpp"
#include "minihorn/error.hpp"

namespace minihorn::replica {

using dataconn::Message;
using dataconn::MsgType;

struct ReplicaServer::Connection {
    explicit Connection(net::Socket s, std::size_t max_in_flight) : sock(std::move(s)), slots(static_cast<std::ptrdiff_t>(max_in_flight)) {}

    void reply(const Message& m) {
        std::lock_guard lk(send_mu);
        if (broken) return;
        try {
            dataconn::send_message(sock, m);
        } catch (const Error&) {
            broken = true;
            sock.shutdown();
        }
    }

    void finish_one() {
        slots.release();
        std::lock_guard lk(mu);
        if (--in_flight == 0) drained.notify_all();
    }

    net::Socket sock;
    std::mutex send_mu;
    bool broken = false;
    std::counting_semaphore<> slots;
    std::mutex mu;
    std::condition_variable drained;
    std::size_t in_flight = 0;
    std::thread reader;
    std::atomic<bool> finished{false};
};

ReplicaServer::ReplicaServer(std::shared_ptr<BackingStore> store, const net::Endpoint& listen, ServerOptions options)
    : store_(std::move(store)), options_(options), listener_(listen), pool_(options.workers) {
    acceptor_ = std::thread([this] { accept_loop(); });
}

ReplicaServer::~ReplicaServer() { stop(); }

void ReplicaServer::stop() {
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

void ReplicaServer::wait() {
    std::unique_lock lk(mu_);
    stopped_cv_.wait(lk, [this] { return stopped_; });
}

void ReplicaServer::accept_loop() {
    for (;;) {
        net::Socket s = listener_.accept();
        if (!s.valid()) return;
        auto conn = std::make_shared<Connection>(std::move(s), options_.max_in_flight);
        connections_.fetch_add(1, std::memory_order_relaxed);
        std::lock_guard lk(mu_);
        if (stopped_) return;
        reap_finished();
        conn->reader = std::thread([this, conn] { serve(conn); });
        conns_.push_back(conn);
    }
}

void ReplicaServer::reap_finished() {
    for (auto it = conns_.begin(); it != conns_.end();) {
        if ((*it)->finished) {
            (*it)->reader.join();
            it = conns_.erase(it);
        } else {
            ++it;
        }
    }
}

void ReplicaServer::serve(const std::shared_ptr<Connection>& conn) {
    try {
        dataconn::FrameReader reader(conn->sock);
        while (auto m = reader.next()) {
            switch (m->type) {
                case MsgType::ping:
                    pings_.fetch_add(1, std::memory_order_relaxed);
                    conn->reply(dataconn::make_response(m->id, m->offset));
                    continue;
                case MsgType::read:
                case MsgType::write:
                case MsgType::unmap:
                    break;
                default:
                    throw Error(Errc::protocol, fmt::format("unexpected {} frame from client", dataconn::to_string(m->type)));
            }
            auto req = std::make_shared<Message>(std::move(*m));
            if (store_->completes_inline()) {
                execute(*conn, *req);
                continue;
            }
            conn->slots.acquire();
            {
                std::lock_guard lk(conn->mu);
                ++conn->in_flight;
            }
            pool_.post([this, conn, req] {
                execute(*conn, *req);
                conn->finish_one();
            });
        }
    } catch (const Error& e) {
        if (e.code() == Errc::protocol) {
            protocol_errors_.fetch_add(1, std::memory_order_relaxed);
            spdlog::warn("replica: closing connection after protocol error: {}", e.what());
        }
    }
    conn->sock.shutdown();
    {
        std::unique_lock lk(conn->mu);
        conn->drained.wait(lk, [&] { return conn->in_flight == 0; });
    }
    conn->finished = true;
}

void ReplicaServer::execute(Connection& conn, const Message& m) {
    try {
        switch (m.type) {
            case MsgType::read: {
                reads_.fetch_add(1, std::memory_order_relaxed);
                if (m.length > dataconn::kMaxPayload) throw Error(Errc::invalid_argument, "read too large");
                std::vector<std::byte> data(m.length);
                store_->read(m.offset, data);
                conn.reply(dataconn::make_response(m.id, m.offset, std::move(data)));
                return;
            }
            case MsgType::write:
                writes_.fetch_add(1, std::memory_order_relaxed);
                store_->write(m.offset, m.payload);
                break;
            default:
                unmaps_.fetch_add(1, std::memory_order_relaxed);
                store_->unmap(m.offset, m.length);
                break;
        }
        conn.reply(dataconn::make_response(m.id, m.offset));
    } catch (const std::exception& e) {
        error_replies_.fetch_add(1, std::memory_order_relaxed);
        conn.reply(dataconn::make_error(m.id, e.what()));
    }
}

ServerStats ReplicaServer::stats() const noexcept {
    return {connections_.load(), reads_.load(), writes_.load(), unmaps_.load(),
            pings_.load(),       error_replies_.load(), protocol_errors_.load()};
}

std::size_t ReplicaServer::open_connections() const {
    std::lock_guard lk(mu_);
    std::size_t n = 0;
    for (const auto& c : conns_) n += c->finished ? 0 : 1;
    return n;
}

}  // namespace minihorn::replica
