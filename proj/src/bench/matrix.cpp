#include "minihorn/bench/matrix.hpp"

#include <unistd.h>

#include <fstream>
#include <map>
#include <tuple>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "minihorn/dbs/store.hpp"
#include "minihorn/error.hpp"
#include "minihorn/frontend/nbd.hpp"
#include "minihorn/replica/backing_store.hpp"
#include "minihorn/replica/chained_file.hpp"
#include "minihorn/replica/server.hpp"
#include "minihorn/util/bytes.hpp"

namespace minihorn::bench {

namespace fs = std::filesystem;
using controller::Strategy;

namespace {

template <typename E, std::size_t N>
E parse_enum(const std::string& s, const E (&all)[N], const char* what) {
    for (E e : all) {
        if (s == to_string(e)) return e;
    }
    throw Error(Errc::invalid_argument, fmt::format("unknown {} '{}'", what, s));
}

constexpr Backend kAllBackends[] = {Backend::chained_file, Backend::dbs, Backend::null};
constexpr FrontendKind kAllFrontends[] = {FrontendKind::direct, FrontendKind::nbd};

bool is_read(Workload w) { return w == Workload::iops_4k_rand_read || w == Workload::bw_1m_seq_read; }
bool is_iops(Workload w) { return w == Workload::iops_4k_rand_read || w == Workload::iops_4k_rand_write; }

/// Removes a directory tree on scope exit.
struct ScratchDir {
    fs::path path;
    explicit ScratchDir(fs::path p) : path(std::move(p)) { fs::create_directories(path); }
    ScratchDir(const ScratchDir&) = delete;
    ScratchDir& operator=(const ScratchDir&) = delete;
    ~ScratchDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

std::shared_ptr<replica::BackingStore> make_store(const MatrixConfig& cfg, Layer layer, Backend backend,
                                                  const fs::path& dir, std::size_t index) {
    if (layer == Layer::null_storage || backend == Backend::null) {
        return std::make_shared<replica::NullStore>(cfg.volume_size, cfg.block_size);
    }
    if (backend == Backend::chained_file) {
        return replica::ChainedFileStore::create(dir / fmt::format("replica-{}", index), cfg.volume_size, cfg.block_size,
                                                 {.versioning = true, .direct_io = cfg.direct_io});
    }
    dbs::DeviceGeometry geo;
    geo.block_size = cfg.block_size;
    geo.max_volumes = 4;
    geo.max_snapshots = 64;
    geo.device_size = bytes::align_up(cfg.volume_size + (32ull << 20), geo.extent_size());
    const fs::path dev = dir / fmt::format("replica-{}.img", index);
    { std::ofstream(dev, std::ios::binary); }
    fs::resize_file(dev, geo.device_size);
    dbs::Store::init(dev, geo, {.force = false, .direct_io = cfg.direct_io});
    std::shared_ptr<dbs::Store> store = dbs::Store::open(dev, {.direct_io = cfg.direct_io});
    store->create_volume("bench", cfg.volume_size);
    return std::make_shared<replica::DbsVolumeStore>(std::move(store), "bench");
}

/// Everything one cell needs, torn down in reverse order of construction.
class Environment {
public:
    Environment(const MatrixConfig& cfg, Layer layer, const Variant& v, const fs::path& dir) : scratch_(dir) {
        controller::ControllerConfig cc;
        cc.strategy = v.strategy;
        cc.connections = cfg.connections ? cfg.connections : default_connections(v.strategy);
        cc.capacity = cfg.capacity;
        cc.volume_size = cfg.volume_size;
        cc.block_size = cfg.block_size;
        cc.null_backend = layer == Layer::null_backend;
        if (!cc.null_backend) {
            for (std::size_t i = 0; i < std::max<std::size_t>(1, cfg.replicas); ++i) {
                servers_.push_back(std::make_unique<replica::ReplicaServer>(make_store(cfg, layer, v.backend, dir, i),
                                                                            net::Endpoint{"127.0.0.1", 0}));
                cc.replicas.push_back(servers_.back()->endpoint());
            }
        }
        ctl_ = controller::Controller::start(cc);
        if (cfg.frontend == FrontendKind::nbd) {
            nbd_server_ = std::make_unique<nbd::Server>(*ctl_, net::Endpoint{"127.0.0.1", 0});
            nbd_client_ = nbd::Client::connect(nbd_server_->endpoint());
        }
    }

    BlockTarget& target() { return nbd_client_ ? static_cast<BlockTarget&>(*nbd_client_) : *ctl_; }

private:
    ScratchDir scratch_;
    std::vector<std::unique_ptr<replica::ReplicaServer>> servers_;
    std::unique_ptr<controller::Controller> ctl_;
    std::unique_ptr<nbd::Server> nbd_server_;
    std::unique_ptr<nbd::Client> nbd_client_;
};

fs::path work_root(const MatrixConfig& cfg) {
    if (!cfg.work_dir.empty()) return cfg.work_dir;
    return fs::temp_directory_path() / fmt::format("minihorn-bench-{}", ::getpid());
}

std::string human(double v) {
    if (v >= 1e6) return fmt::format("{:.2f}M", v / 1e6);
    if (v >= 1e4) return fmt::format("{:.1f}k", v / 1e3);
    return fmt::format("{:.0f}", v);
}

}  // namespace

const char* to_string(Layer v) noexcept {
    switch (v) {
        case Layer::null_backend: return "null_backend";
        case Layer::null_storage: return "null_storage";
        case Layer::full_engine: return "full_engine";
    }
    return "?";
}

const char* to_string(Backend v) noexcept {
    switch (v) {
        case Backend::chained_file: return "chained_file";
        case Backend::dbs: return "dbs";
        case Backend::null: return "null";
    }
    return "?";
}

const char* to_string(Workload v) noexcept {
    switch (v) {
        case Workload::iops_4k_rand_read: return "iops_4k_rand_read";
        case Workload::iops_4k_rand_write: return "iops_4k_rand_write";
        case Workload::bw_1m_seq_read: return "bw_1m_seq_read";
        case Workload::bw_1m_seq_write: return "bw_1m_seq_write";
    }
    return "?";
}

const char* to_string(FrontendKind v) noexcept { return v == FrontendKind::direct ? "direct" : "nbd"; }

Layer parse_layer(const std::string& s) { return parse_enum(s, kAllLayers, "layer"); }
Backend parse_backend(const std::string& s) { return parse_enum(s, kAllBackends, "backend"); }
Workload parse_workload(const std::string& s) { return parse_enum(s, kAllWorkloads, "workload"); }
FrontendKind parse_frontend(const std::string& s) { return parse_enum(s, kAllFrontends, "frontend"); }

std::string Variant::name() const { return fmt::format("{}/{}", controller::to_string(strategy), to_string(backend)); }

std::vector<Variant> all_variants() {
    std::vector<Variant> out;
    for (Strategy s : {Strategy::legacy, Strategy::token}) {
        for (Backend b : kAllBackends) out.push_back({s, b});
    }
    return out;
}

std::size_t default_connections(Strategy s) noexcept { return s == Strategy::legacy ? 2 : 6; }

frontend::WorkloadSpec workload_spec(const MatrixConfig& cfg, Workload w) {
    frontend::WorkloadSpec spec;
    switch (w) {
        case Workload::iops_4k_rand_read: spec.pattern = frontend::Pattern::rand_read; break;
        case Workload::iops_4k_rand_write: spec.pattern = frontend::Pattern::rand_write; break;
        case Workload::bw_1m_seq_read: spec.pattern = frontend::Pattern::seq_read; break;
        case Workload::bw_1m_seq_write: spec.pattern = frontend::Pattern::seq_write; break;
    }
    spec.io_size = is_iops(w) ? 4096 : 1u << 20;
    spec.queue_depth = is_iops(w) ? cfg.iops_queue_depth : cfg.bw_queue_depth;
    spec.num_queues = cfg.num_queues;
    spec.ops = cfg.ops;
    spec.duration_s = cfg.duration_s;
    spec.seed = cfg.seed;
    return spec;
}

double Cell::headline() const { return is_iops(workload) ? report.iops : report.bandwidth / 1e6; }

frontend::BenchReport run_cell(const MatrixConfig& cfg, Layer layer, Workload w, const Variant& v) {
    static std::atomic<std::uint64_t> serial{0};
    const fs::path dir = work_root(cfg) / fmt::format("cell-{}-{}", ::getpid(), serial++);
    Environment env(cfg, layer, v, dir);
    if (layer == Layer::full_engine && v.backend != Backend::null && is_read(w)) {
        // Reads of never-written blocks would skip the media entirely.
        frontend::WorkloadSpec fill;
        fill.pattern = frontend::Pattern::seq_write;
        fill.io_size = 1u << 20;
        fill.queue_depth = 4;
        fill.ops = cfg.volume_size / fill.io_size;
        fill.verify = true;
        fill.seed = cfg.seed;
        const auto r = frontend::run_workload(env.target(), fill);
        if (!r.ok()) throw Error(Errc::io, fmt::format("prefill failed: {}", r.first_error));
    }
    auto report = frontend::run_workload(env.target(), workload_spec(cfg, w));
    if (!report.ok()) throw Error(Errc::io, report.first_error);
    return report;
}

MatrixReport run_matrix(const MatrixConfig& cfg, const CellCallback& on_cell) {
    MatrixReport out;
    out.config = cfg;
    // Cells whose layer never reaches the backend (or the strategy) share one run.
    std::map<std::tuple<int, int, int, int>, std::size_t> measured;
    for (Workload w : cfg.workloads) {
        for (Layer layer : cfg.rows) {
            for (const Variant& v : cfg.variants) {
                Cell cell;
                cell.layer = layer;
                cell.workload = w;
                cell.variant = v;
                std::tuple<int, int, int, int> key{static_cast<int>(w), static_cast<int>(layer), -1, -1};
                if (layer != Layer::null_backend) std::get<2>(key) = static_cast<int>(v.strategy);
                if (layer == Layer::full_engine && v.backend != Backend::null) std::get<3>(key) = static_cast<int>(v.backend);
                if (layer == Layer::full_engine && v.backend == Backend::null) std::get<1>(key) = static_cast<int>(Layer::null_storage);
                if (auto it = measured.find(key); it != measured.end()) {
                    const Cell& src = out.cells[it->second];
                    cell.ok = src.ok;
                    cell.error = src.error;
                    cell.report = src.report;
                    cell.reused = true;
                } else {
                    try {
                        cell.report = run_cell(cfg, layer, w, v);
                        cell.ok = true;
                    } catch (const std::exception& e) {
                        cell.error = e.what();
                        spdlog::warn("bench cell {} {} {} failed: {}", to_string(w), to_string(layer), v.name(), e.what());
                    }
                    measured.emplace(key, out.cells.size());
                }
                out.cells.push_back(cell);
                if (on_cell) on_cell(out.cells.back());
            }
        }
    }
    std::error_code ec;
    if (cfg.work_dir.empty()) fs::remove_all(work_root(cfg), ec);
    return out;
}

const Cell* MatrixReport::find(Layer l, Workload w, const Variant& v) const {
    for (const auto& c : cells) {
        if (c.layer == l && c.workload == w && c.variant == v) return &c;
    }
    return nullptr;
}

std::string MatrixReport::table() const {
    std::string out;
    constexpr int kFirst = 14;
    std::size_t width = 12;
    for (const auto& v : config.variants) width = std::max(width, v.name().size() + 2);
    for (Workload w : config.workloads) {
        out += fmt::format("{} ({})\n", to_string(w), is_iops(w) ? "IOPS" : "MB/s");
        out += fmt::format("{:<{}}", "", kFirst);
        for (const auto& v : config.variants) out += fmt::format("{:>{}}", v.name(), width);
        out += '\n';
        for (Layer l : config.rows) {
            out += fmt::format("{:<{}}", to_string(l), kFirst);
            for (const auto& v : config.variants) {
                const Cell* c = find(l, w, v);
                std::string text = !c ? "-" : !c->ok ? "FAILED" : is_iops(w) ? human(c->headline()) : fmt::format("{:.0f}", c->headline());
                out += fmt::format("{:>{}}", text, width);
            }
            out += '\n';
        }
        out += '\n';
    }
    return out;
}

std::string MatrixReport::key_values() const {
    std::string out;
    out += fmt::format("matrix.frontend={}\nmatrix.replicas={}\nmatrix.volume_size={}\nmatrix.cells={}\n",
                       to_string(config.frontend), config.replicas, config.volume_size, cells.size());
    for (const auto& c : cells) {
        const std::string prefix = fmt::format("cell.{}.{}.{}.{}.", to_string(c.workload), to_string(c.layer),
                                               controller::to_string(c.variant.strategy), to_string(c.variant.backend));
        out += fmt::format("{}status={}\n", prefix, c.ok ? "ok" : "failed");
        out += fmt::format("{}reused={}\n", prefix, c.reused ? 1 : 0);
        if (!c.ok) {
            out += fmt::format("{}error={}\n", prefix, c.error);
            continue;
        }
        out += frontend::report_key_values(c.report, prefix);
    }
    return out;
}

std::vector<std::string> MatrixReport::monotonicity_violations(double tolerance) const {
    std::vector<std::string> out;
    for (Workload w : config.workloads) {
        for (const auto& v : config.variants) {
            for (auto [upper, lower] : {std::pair{Layer::null_backend, Layer::null_storage},
                                        std::pair{Layer::null_storage, Layer::full_engine}}) {
                const Cell* u = find(upper, w, v);
                const Cell* l = find(lower, w, v);
                if (!u || !l || !u->ok || !l->ok) continue;
                if (u->headline() < l->headline() * (1.0 - tolerance)) {
                    out.push_back(fmt::format("{} {}: {} {:.1f} < {} {:.1f}", to_string(w), v.name(), to_string(upper),
                                              u->headline(), to_string(lower), l->headline()));
                }
            }
        }
    }
    return out;
}

}  // namespace minihorn::bench
