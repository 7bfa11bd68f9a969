#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>

#include "minihorn/block_target.hpp"
#include "minihorn/util/send_combiner.hpp"
#include "minihorn/util/socket.hpp"
#include "minihorn/util/thread_pool.hpp"

namespace minihorn::nbd {

// Wire constants of the fixed-newstyle NBD protocol.
inline constexpr std::uint64_t kInitMagic = 0x4e42444d41474943ull;  // "NBDMAGIC"
inline constexpr std::uint64_t kOptMagic = 0x49484156454f5054ull;   // "IHAVEOPT"
inline constexpr std::uint64_t kRepMagic = 0x0003e889045565a9ull;
inline constexpr std::uint32_t kRequestMagic = 0x25609513;
inline constexpr std::uint32_t kSimpleReplyMagic = 0x67446698;

inline constexpr std::uint16_t kFlagFixedNewstyle = 1 << 0;
inline constexpr std::uint16_t kFlagNoZeroes = 1 << 1;
inline constexpr std::uint32_t kClientFixedNewstyle = 1 << 0;
inline constexpr std::uint32_t kClientNoZeroes = 1 << 1;

inline constexpr std::uint16_t kTxHasFlags = 1 << 0;
inline constexpr std::uint16_t kTxReadOnly = 1 << 1;
inline constexpr std::uint16_t kTxSendFlush = 1 << 2;
inline constexpr std::uint16_t kTxSendFua = 1 << 3;
inline constexpr std::uint16_t kTxSendTrim = 1 << 5;
inline constexpr std::uint16_t kTxCanMultiConn = 1 << 8;

enum class Option : std::uint32_t { export_name = 1, abort = 2, list = 3, info = 6, go = 7 };

inline constexpr std::uint32_t kRepAck = 1;
inline constexpr std::uint32_t kRepServer = 2;
inline constexpr std::uint32_t kRepInfo = 3;
inline constexpr std::uint32_t kRepErrUnsup = 0x80000001;
inline constexpr std::uint32_t kRepErrInvalid = 0x80000003;
inline constexpr std::uint32_t kRepErrUnknown = 0x80000006;

inline constexpr std::uint16_t kInfoExport = 0;
inline constexpr std::uint16_t kInfoBlockSize = 3;

enum class Command : std::uint16_t { read = 0, write = 1, disc = 2, flush = 3, trim = 4 };

inline constexpr std::uint32_t kEIO = 5;
inline constexpr std::uint32_t kENOMEM = 12;
inline constexpr std::uint32_t kEINVAL = 22;
inline constexpr std::uint32_t kENOSPC = 28;

inline constexpr std::uint32_t kMaxRequest = 32u << 20;

struct ServerOptions {
    std::string export_name = "minihorn";
    std::size_t workers = 16;
    std::size_t max_in_flight = 128;  // per connection
};

struct ServerStats {
    std::uint64_t connections = 0;
    std::uint64_t commands = 0;
    std::uint64_t error_replies = 0;
    std::uint64_t protocol_errors = 0;
};

/// Exports one block target over NBD. Each connection gets a reader thread;
/// commands run on a shared pool and replies go out under a per-connection lock.
class Server {
public:
    Server(BlockTarget& target, const net::Endpoint& listen, ServerOptions options = {});
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;
    ~Server();

    std::uint16_t port() const noexcept { return listener_.port(); }
    net::Endpoint endpoint() const { return {listener_.host(), listener_.port()}; }

    void stop();
    void wait();

    ServerStats stats() const noexcept;
    std::size_t open_connections() const;

private:
    struct Connection;

    void accept_loop();
    void serve(const std::shared_ptr<Connection>& conn);
    /// false when the client should be dropped; true once transmission may start.
    bool negotiate(Connection& conn);
    void execute(Connection& conn, Command cmd, std::uint64_t handle, std::uint64_t offset,
                 std::uint32_t length, std::vector<std::byte> payload);

    BlockTarget& target_;
    ServerOptions options_;
    net::Listener listener_;
    ThreadPool pool_;

    mutable std::mutex mu_;
    std::condition_variable stopped_cv_;
    bool stopped_ = false;
    std::list<std::shared_ptr<Connection>> conns_;
    std::thread acceptor_;

    std::atomic<std::uint64_t> connections_{0};
    std::atomic<std::uint64_t> commands_{0};
    std::atomic<std::uint64_t> error_replies_{0};
    std::atomic<std::uint64_t> protocol_errors_{0};
};

struct ExportInfo {
    std::uint64_t size = 0;
    std::uint16_t flags = 0;
    std::uint32_t min_block = 1;
    std::uint32_t preferred_block = 4096;
    std::uint32_t max_block = kMaxRequest;
};

/// Simple-reply NBD client. Safe for concurrent callers; requests are matched
/// to replies by handle.
class Client : public BlockTarget {
public:
    /// Fixed-newstyle handshake ending in NBD_OPT_GO.
    static std::unique_ptr<Client> connect(const net::Endpoint& ep, const std::string& export_name = "minihorn");
    ~Client() override;

    const ExportInfo& info() const noexcept { return info_; }

    std::uint64_t size() const override { return info_.size; }
    std::uint32_t block_size() const override { return info_.min_block; }
    void read(std::uint64_t offset, std::span<std::byte> out) override;
    void write(std::uint64_t offset, std::span<const std::byte> data) override;
    void unmap(std::uint64_t offset, std::uint64_t length) override;
    void flush() override;

    /// Sends one command and returns the reply's error field without throwing.
    /// `out` receives read data; `payload` is sent for writes.
    std::uint32_t command(Command cmd, std::uint64_t offset, std::uint32_t length,
                          std::span<const std::byte> payload = {}, std::span<std::byte> out = {});
    /// Sends NBD_CMD_DISC and closes the socket.
    void disconnect();

private:
    struct Pending;

    explicit Client(net::Socket sock, ExportInfo info);
    void receive_loop();
    void fail_all(const std::string& why);

    net::Socket sock_;
    net::SendCombiner out_{sock_};
    ExportInfo info_;
    std::mutex mu_;
    std::unordered_map<std::uint64_t, Pending*> pending_;
    std::uint64_t next_handle_ = 1;
    std::string failure_;
    bool closed_ = false;
    std::thread receiver_;
};

}  // namespace minihorn::nbd
