#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <variant>
#include <vector>

#include "minihorn/controller/controller.hpp"
#include "minihorn/controller/token_pool.hpp"
#include "minihorn/dataconn/message.hpp"
#include "minihorn/util/socket.hpp"

namespace minihorn::controller {

using Payload = std::shared_ptr<const std::vector<std::byte>>;

/// One request to one replica. The issuer owns it and blocks in wait().
struct PendingIo {
    enum class Outcome { ok, remote_error, transport };

    dataconn::MsgType type = dataconn::MsgType::ping;
    std::uint64_t offset = 0;
    std::uint32_t length = 0;
    Payload payload;
    std::span<std::byte> read_out;

    std::uint32_t token = 0;
    bool holds_token = false;
    Outcome outcome = Outcome::ok;
    std::string message;

    void complete(Outcome o, std::string msg = {}) {
        outcome = o;
        message = std::move(msg);
        done_.store(1, std::memory_order_release);
        done_.notify_one();
    }
    void wait() {
        while (done_.load(std::memory_order_acquire) == 0) done_.wait(0, std::memory_order_acquire);
    }
    bool done() const { return done_.load(std::memory_order_acquire) != 0; }

private:
    std::atomic<std::uint32_t> done_{0};
};

/// A TCP connection to a replica with a sender thread (batched writev from a
/// queue) and a receiver thread decoding frames.
class Connection {
public:
    using FrameHandler = std::function<void(dataconn::Message&&)>;
    using FailureHandler = std::function<void(const std::string&)>;

    Connection(net::Socket sock, std::size_t replica, std::size_t index, const WireTap* tap);
    ~Connection();

    void run(FrameHandler on_frame, FailureHandler on_failure);
    void send(const dataconn::Header& h, Payload payload);
    void shutdown() noexcept;
    void join();

private:
    struct Out {
        std::array<std::byte, dataconn::kHeaderSize> header;
        Payload payload;
    };

    void send_loop();
    void recv_loop();
    void fail(const std::string& why);

    net::Socket sock_;
    std::size_t replica_;
    std::size_t index_;
    const WireTap* tap_;
    FrameHandler on_frame_;
    FailureHandler on_failure_;

    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Out> queue_;
    bool closing_ = false;
    std::thread sender_;
    std::thread receiver_;
};

/// Dispatcher state for one replica. Subclasses implement the two strategies.
class ReplicaClient {
public:
    ReplicaClient(std::size_t index, net::Endpoint address, const WireTap* tap);
    virtual ~ReplicaClient();

    /// Connects and handshakes `connections` sockets. Throws on failure.
    void connect(std::size_t connections);
    /// Hands the request to the dispatcher. May block (token acquisition).
    virtual void submit(PendingIo& io) = 0;
    /// Called by the issuer once io.wait() returned.
    virtual void finish(PendingIo&) {}
    /// Permanently excludes this replica and fails everything in flight.
    void mark_failed(const std::string& why);
    virtual void shutdown();

    bool healthy() const noexcept { return !failed_.load(std::memory_order_acquire); }
    virtual bool has_loop_worker() const noexcept { return false; }
    ReplicaStatus status() const;

protected:
    virtual void start_dispatch() = 0;
    virtual void on_frame(dataconn::Message&& m) = 0;
    virtual void fail_in_flight() = 0;
    virtual std::uint32_t tokens_available() const { return 0; }

    void send(std::uint32_t id, const PendingIo& io);
    void count(dataconn::MsgType t);
    static void deliver(PendingIo& io, dataconn::Message&& m);

    std::size_t index_;
    net::Endpoint address_;
    const WireTap* tap_;
    std::vector<std::unique_ptr<Connection>> conns_;
    std::atomic<std::uint64_t> next_conn_{0};
    std::atomic<bool> failed_{false};
    mutable std::mutex failure_mu_;
    std::string failure_;
    std::atomic<std::uint64_t> reads_{0};
    std::atomic<std::uint64_t> writes_{0};
    std::atomic<std::uint64_t> unmaps_{0};
    std::atomic<std::uint64_t> stray_{0};
};

/// Fixed slot array indexed by pool tokens; receivers complete slots directly.
class TokenClient final : public ReplicaClient {
public:
    TokenClient(std::size_t index, net::Endpoint address, const WireTap* tap, std::uint32_t capacity);

    void submit(PendingIo& io) override;
    void finish(PendingIo& io) override;
    void shutdown() override;

protected:
    void start_dispatch() override {}
    void on_frame(dataconn::Message&& m) override;
    void fail_in_flight() override;
    std::uint32_t tokens_available() const override { return pool_.available(); }

private:
    TokenPool pool_;
    std::unique_ptr<std::atomic<PendingIo*>[]> slots_;
};

/// A single loop thread assigns ids, owns the id map and matches responses.
class LegacyClient final : public ReplicaClient {
public:
    LegacyClient(std::size_t index, net::Endpoint address, const WireTap* tap);
    ~LegacyClient() override;

    void submit(PendingIo& io) override;
    void shutdown() override;
    bool has_loop_worker() const noexcept override { return true; }

protected:
    void start_dispatch() override;
    void on_frame(dataconn::Message&& m) override;
    void fail_in_flight() override;

private:
    struct Request {
        PendingIo* io;
    };
    struct Response {
        dataconn::Message msg;
    };
    struct Failure {};
    struct Stop {};
    using Event = std::variant<Request, Response, Failure, Stop>;

    void push(Event e);
    void loop();

    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Event> events_;
    std::thread worker_;

    // Loop-thread state.
    std::unordered_map<std::uint32_t, PendingIo*> in_flight_;
    std::uint32_t next_id_ = 1;
    bool dead_ = false;
};

}  // namespace minihorn::controller
