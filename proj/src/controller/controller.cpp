#include "minihorn/controller/controller.hpp"

#include <array>
#include <cstring>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "minihorn/error.hpp"
#include "replica_client.hpp"

namespace minihorn::controller {

using dataconn::MsgType;

namespace {
constexpr std::size_t kMaxReplicas = 16;
constexpr std::size_t kNoReplica = static_cast<std::size_t>(-1);
// Largest single frame; bigger requests are split.
constexpr std::uint64_t kMaxChunk = dataconn::kMaxPayload;
}  // namespace

const char* to_string(Strategy s) noexcept { return s == Strategy::legacy ? "legacy" : "token"; }

Strategy parse_strategy(const std::string& text) {
    if (text == "legacy") return Strategy::legacy;
    if (text == "token") return Strategy::token;
    throw Error(Errc::invalid_argument, fmt::format("unknown strategy '{}' (legacy|token)", text));
}

Controller::Controller(ControllerConfig config) : config_(std::move(config)) {}

std::unique_ptr<Controller> Controller::start(ControllerConfig config) {
    if (config.volume_size == 0 || config.block_size == 0 || config.volume_size % config.block_size != 0) {
        throw Error(Errc::invalid_argument, "volume size must be a positive multiple of the block size");
    }
    std::unique_ptr<Controller> c(new Controller(std::move(config)));
    const auto& cfg = c->config_;
    if (cfg.null_backend) return c;
    if (cfg.replicas.empty()) throw Error(Errc::invalid_argument, "no replicas configured");
    if (cfg.replicas.size() > kMaxReplicas) {
        throw Error(Errc::invalid_argument, fmt::format("at most {} replicas supported", kMaxReplicas));
    }
    if (cfg.connections == 0) throw Error(Errc::invalid_argument, "connections per replica must be at least 1");
    if (cfg.capacity == 0) throw Error(Errc::invalid_argument, "capacity must be at least 1");

    const WireTap* tap = cfg.wire_tap ? &c->config_.wire_tap : nullptr;
    for (std::size_t i = 0; i < cfg.replicas.size(); ++i) {
        std::unique_ptr<ReplicaClient> client;
        if (cfg.strategy == Strategy::token) {
            client = std::make_unique<TokenClient>(i, cfg.replicas[i], tap, cfg.capacity);
        } else {
            client = std::make_unique<LegacyClient>(i, cfg.replicas[i], tap);
        }
        try {
            client->connect(cfg.connections);
        } catch (const Error& e) {
            client->mark_failed(fmt::format("connect: {}", e.what()));
        }
        c->clients_.push_back(std::move(client));
    }
    if (c->healthy_replicas() == 0) {
        throw Error(Errc::unavailable, fmt::format("no replica reachable: {}", c->clients_.front()->status().failure));
    }
    return c;
}

Controller::~Controller() {
    for (auto& c : clients_) c->shutdown();
}

std::size_t Controller::healthy_replicas() const {
    std::size_t n = 0;
    for (const auto& c : clients_) n += c->healthy() ? 1 : 0;
    return n;
}

std::vector<ReplicaStatus> Controller::replicas() const {
    std::vector<ReplicaStatus> out;
    for (const auto& c : clients_) out.push_back(c->status());
    return out;
}

std::size_t Controller::loop_worker_count() const {
    std::size_t n = 0;
    for (const auto& c : clients_) n += c->has_loop_worker() ? 1 : 0;
    return n;
}

std::size_t Controller::pick_reader(std::size_t exclude) {
    const std::size_t n = clients_.size();
    const std::uint64_t start = read_cursor_.fetch_add(1, std::memory_order_relaxed);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = (start + k) % n;
        if (i != exclude && clients_[i]->healthy()) return i;
    }
    return kNoReplica;
}

void Controller::read(std::uint64_t offset, std::span<std::byte> out) {
    check_block_range(offset, out.size(), config_.block_size, config_.volume_size);
    if (config_.null_backend) {
        std::memset(out.data(), 0, out.size());
        return;
    }
    while (!out.empty()) {
        const std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(out.size(), kMaxChunk));
        read_chunk(offset, out.first(n));
        offset += n;
        out = out.subspan(n);
    }
}

void Controller::read_chunk(std::uint64_t offset, std::span<std::byte> out) {
    std::size_t last = kNoReplica;
    std::string why = "no healthy replica";
    for (int attempt = 0; attempt < 2; ++attempt) {
        const std::size_t r = pick_reader(last);
        if (r == kNoReplica) break;
        PendingIo io;
        io.type = MsgType::read;
        io.offset = offset;
        io.length = static_cast<std::uint32_t>(out.size());
        io.read_out = out;
        clients_[r]->submit(io);
        io.wait();
        clients_[r]->finish(io);
        if (io.outcome == PendingIo::Outcome::ok) return;
        why = io.message;
        clients_[r]->mark_failed(io.message);
        last = r;
    }
    throw Error(Errc::io, fmt::format("read at {} failed: {}", offset, why));
}

void Controller::write(std::uint64_t offset, std::span<const std::byte> data) {
    check_block_range(offset, data.size(), config_.block_size, config_.volume_size);
    if (config_.null_backend) return;
    while (!data.empty()) {
        const std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(data.size(), kMaxChunk));
        mutate_chunk(MsgType::write, offset, static_cast<std::uint32_t>(n), data.first(n));
        offset += n;
        data = data.subspan(n);
    }
}

void Controller::unmap(std::uint64_t offset, std::uint64_t length) {
    check_block_range(offset, length, config_.block_size, config_.volume_size);
    if (config_.null_backend) return;
    // The frame length field is 32 bits wide.
    const std::uint64_t max_unmap = (std::uint64_t{1} << 31) / config_.block_size * config_.block_size;
    while (length > 0) {
        const std::uint64_t n = std::min(length, max_unmap);
        mutate_chunk(MsgType::unmap, offset, static_cast<std::uint32_t>(n), {});
        offset += n;
        length -= n;
    }
}

void Controller::mutate_chunk(MsgType type, std::uint64_t offset, std::uint32_t length,
                              std::span<const std::byte> data) {
    Payload payload;
    if (type == MsgType::write) payload = std::make_shared<const std::vector<std::byte>>(data.begin(), data.end());

    std::array<PendingIo, kMaxReplicas> ios;
    std::array<std::size_t, kMaxReplicas> targets{};
    std::size_t n = 0;
    for (std::size_t i = 0; i < clients_.size(); ++i) {
        if (!clients_[i]->healthy()) continue;
        PendingIo& io = ios[n];
        io.type = type;
        io.offset = offset;
        io.length = length;
        io.payload = payload;
        targets[n++] = i;
        clients_[i]->submit(io);
    }
    std::size_t acks = 0;
    std::string why = "no healthy replica";
    for (std::size_t k = 0; k < n; ++k) {
        ios[k].wait();
        clients_[targets[k]]->finish(ios[k]);
        if (ios[k].outcome == PendingIo::Outcome::ok) {
            ++acks;
        } else {
            why = ios[k].message;
            clients_[targets[k]]->mark_failed(ios[k].message);
        }
    }
    if (acks == 0) {
        throw Error(Errc::io, fmt::format("{} at {} failed on every replica: {}", dataconn::to_string(type), offset, why));
    }
}

}  // namespace minihorn::controller
