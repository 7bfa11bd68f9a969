#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "minihorn/controller/controller.hpp"
#include "minihorn/frontend/workload.hpp"

namespace minihorn::bench {

/// Where I/O stops: at the controller, at the replica's network edge, or on media.
enum class Layer { null_backend, null_storage, full_engine };
enum class Backend { chained_file, dbs, null };
enum class Workload { iops_4k_rand_read, iops_4k_rand_write, bw_1m_seq_read, bw_1m_seq_write };
enum class FrontendKind { direct, nbd };

const char* to_string(Layer v) noexcept;
const char* to_string(Backend v) noexcept;
const char* to_string(Workload v) noexcept;
const char* to_string(FrontendKind v) noexcept;
Layer parse_layer(const std::string& s);
Backend parse_backend(const std::string& s);
Workload parse_workload(const std::string& s);
FrontendKind parse_frontend(const std::string& s);

inline constexpr Layer kAllLayers[] = {Layer::null_backend, Layer::null_storage, Layer::full_engine};
inline constexpr Workload kAllWorkloads[] = {Workload::iops_4k_rand_read, Workload::iops_4k_rand_write,
                                             Workload::bw_1m_seq_read, Workload::bw_1m_seq_write};

struct Variant {
    controller::Strategy strategy = controller::Strategy::token;
    Backend backend = Backend::dbs;

    std::string name() const;
    bool operator==(const Variant&) const = default;
};

std::vector<Variant> all_variants();

struct MatrixConfig {
    std::vector<Layer> rows{std::begin(kAllLayers), std::end(kAllLayers)};
    std::vector<Workload> workloads{std::begin(kAllWorkloads), std::end(kAllWorkloads)};
    std::vector<Variant> variants = all_variants();

    std::size_t replicas = 1;
    /// 0 picks the strategy's customary count: 2 for legacy, 6 for token.
    std::size_t connections = 0;
    std::uint32_t capacity = 1024;
    std::uint64_t volume_size = 256ull << 20;
    std::uint32_t block_size = 4096;
    std::uint32_t iops_queue_depth = 32;
    std::uint32_t bw_queue_depth = 4;
    std::uint32_t num_queues = 1;
    double duration_s = 2.0;
    std::uint64_t ops = 0;  // overrides duration when nonzero
    std::uint64_t seed = 1;
    FrontendKind frontend = FrontendKind::direct;
    /// Backing files for chained_file and dbs replicas go below this directory.
    std::filesystem::path work_dir;
    bool direct_io = true;
};

std::size_t default_connections(controller::Strategy s) noexcept;
frontend::WorkloadSpec workload_spec(const MatrixConfig& cfg, Workload w);

struct Cell {
    Layer layer{};
    Workload workload{};
    Variant variant;
    bool ok = false;
    /// Another column had the identical configuration (a layer that never
    /// reaches the backend); the measurement is shared.
    bool reused = false;
    std::string error;
    frontend::BenchReport report;

    /// IOPS for iops workloads, MB/s for bandwidth workloads.
    double headline() const;
};

struct MatrixReport {
    MatrixConfig config;
    std::vector<Cell> cells;

    const Cell* find(Layer l, Workload w, const Variant& v) const;
    std::string table() const;
    std::string key_values() const;
    /// Adjacent layer pairs where the upper layer falls more than `tolerance`
    /// (fraction) below the lower one; empty when monotone.
    std::vector<std::string> monotonicity_violations(double tolerance) const;
};

using CellCallback = std::function<void(const Cell&)>;

/// Runs every selected cell one after another on loopback replicas hosted in
/// this process. Cell failures are recorded and the matrix continues.
MatrixReport run_matrix(const MatrixConfig& cfg, const CellCallback& on_cell = {});

/// One cell on its own; throws on failure.
frontend::BenchReport run_cell(const MatrixConfig& cfg, Layer layer, Workload w, const Variant& v);

}  // namespace minihorn::bench
