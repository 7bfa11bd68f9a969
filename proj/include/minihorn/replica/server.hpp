#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <list>
#include <memory>
#include <mutex>
#include <thread>

#include "minihorn/dataconn/message.hpp"
#include "minihorn/replica/backing_store.hpp"
#include "minihorn/util/socket.hpp"
#include "minihorn/util/thread_pool.hpp"

namespace minihorn::replica {

struct ServerOptions {
    std::size_t max_in_flight = 128;  // per connection
    std::size_t workers = 16;
};

struct ServerStats {
    std::uint64_t connections = 0;
    std::uint64_t reads = 0;
    std::uint64_t writes = 0;
    std::uint64_t unmaps = 0;
    std::uint64_t pings = 0;
    std::uint64_t error_replies = 0;
    std::uint64_t protocol_errors = 0;
};

/// dataconn server in front of one backing store. One acceptor thread, one
/// reader per connection, store work on a shared pool. Responses may leave in
/// any order; ids pair them with requests.
class ReplicaServer {
public:
    ReplicaServer(std::shared_ptr<BackingStore> store, const net::Endpoint& listen, ServerOptions options = {});
    ReplicaServer(const ReplicaServer&) = delete;
    ReplicaServer& operator=(const ReplicaServer&) = delete;
    ~ReplicaServer();

    std::uint16_t port() const noexcept { return listener_.port(); }
    net::Endpoint endpoint() const { return {listener_.host(), listener_.port()}; }
    BackingStore& store() noexcept { return *store_; }

    /// Closes the listener and every connection. Idempotent.
    void stop();
    /// Blocks until stop() is called from elsewhere.
    void wait();

    ServerStats stats() const noexcept;
    std::size_t open_connections() const;

private:
    struct Connection;

    void accept_loop();
    void serve(const std::shared_ptr<Connection>& conn);
    void execute(Connection& conn, const dataconn::Message& m);
    void reap_finished();

    std::shared_ptr<BackingStore> store_;
    ServerOptions options_;
    net::Listener listener_;
    ThreadPool pool_;

    mutable std::mutex mu_;
    std::condition_variable stopped_cv_;
    bool stopped_ = false;
    std::list<std::shared_ptr<Connection>> conns_;
    std::thread acceptor_;

    std::atomic<std::uint64_t> connections_{0};
    std::atomic<std::uint64_t> reads_{0};
    std::atomic<std::uint64_t> writes_{0};
    std::atomic<std::uint64_t> unmaps_{0};
    std::atomic<std::uint64_t> pings_{0};
    std::atomic<std::uint64_t> error_replies_{0};
    std::atomic<std::uint64_t> protocol_errors_{0};
};

}  // namespace minihorn::replica
