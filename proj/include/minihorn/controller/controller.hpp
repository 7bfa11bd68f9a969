#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "minihorn/block_target.hpp"
#include "minihorn/dataconn/message.hpp"
#include "minihorn/util/socket.hpp"

namespace minihorn::controller {

enum class Strategy { legacy, token };

const char* to_string(Strategy s) noexcept;
/// Accepts "legacy" or "token".
Strategy parse_strategy(const std::string& text);

enum class Health { healthy, failed };

/// One frame seen by the controller, in either direction.
struct WireEvent {
    std::size_t replica = 0;
    std::size_t connection = 0;
    bool outbound = true;
    dataconn::MsgType type = dataconn::MsgType::ping;
    std::uint32_t id = 0;
    std::uint64_t offset = 0;
    std::uint32_t length = 0;
};
/// Called from sender and receiver threads concurrently.
using WireTap = std::function<void(const WireEvent&)>;

struct ControllerConfig {
    std::vector<net::Endpoint> replicas;
    Strategy strategy = Strategy::token;
    std::size_t connections = 6;  // per replica
    std::uint32_t capacity = 1024;  // in-flight ids per replica (token strategy)
    std::uint64_t volume_size = 0;
    std::uint32_t block_size = 4096;
    /// Complete every I/O at the controller without any replica.
    bool null_backend = false;
    WireTap wire_tap;
};

struct ReplicaStatus {
    net::Endpoint address;
    Health health = Health::healthy;
    std::string failure;
    std::size_t connections = 0;
    std::uint64_t reads = 0;
    std::uint64_t writes = 0;
    std::uint64_t unmaps = 0;
    /// Ids currently in the token pool (token strategy only).
    std::uint32_t tokens_available = 0;
    std::uint64_t stray_responses = 0;
};

class ReplicaClient;

/// Routes block I/O to replicas: writes and unmaps go to every healthy replica,
/// reads rotate over them. Safe for concurrent callers; every call blocks until
/// its replicas answered.
class Controller final : public BlockTarget {
public:
    /// Connects and PINGs every connection. Unreachable replicas start out
    /// failed; if none is reachable the call throws Errc::unavailable.
    static std::unique_ptr<Controller> start(ControllerConfig config);

    Controller(const Controller&) = delete;
    Controller& operator=(const Controller&) = delete;
    ~Controller() override;

    std::uint64_t size() const override { return config_.volume_size; }
    std::uint32_t block_size() const override { return config_.block_size; }
    void read(std::uint64_t offset, std::span<std::byte> out) override;
    void write(std::uint64_t offset, std::span<const std::byte> data) override;
    void unmap(std::uint64_t offset, std::uint64_t length) override;

    Strategy strategy() const noexcept { return config_.strategy; }
    bool null_backend() const noexcept { return config_.null_backend; }
    bool completes_inline() const noexcept override { return config_.null_backend; }
    std::vector<ReplicaStatus> replicas() const;
    std::size_t healthy_replicas() const;
    /// Threads running a dispatch loop: one per replica under the legacy strategy, none under token.
    std::size_t loop_worker_count() const;

private:
    explicit Controller(ControllerConfig config);

    std::size_t pick_reader(std::size_t exclude) ;
    void read_chunk(std::uint64_t offset, std::span<std::byte> out);
    void mutate_chunk(dataconn::MsgType type, std::uint64_t offset, std::uint32_t length,
                      std::span<const std::byte> data);

    ControllerConfig config_;
    std::vector<std::unique_ptr<ReplicaClient>> clients_;
    std::atomic<std::uint64_t> read_cursor_{0};
};

}  // namespace minihorn::controller
