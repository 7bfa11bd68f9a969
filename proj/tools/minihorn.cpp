// minihorn: device administration, servers, and the benchmark matrix.

#include <pthread.h>
#include <signal.h>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "minihorn/bench/matrix.hpp"
#include "minihorn/controller/controller.hpp"
#include "minihorn/dbs/store.hpp"
#include "minihorn/error.hpp"
#include "minihorn/frontend/nbd.hpp"
#include "minihorn/frontend/workload.hpp"
#include "minihorn/replica/backing_store.hpp"
#include "minihorn/replica/chained_file.hpp"
#include "minihorn/replica/server.hpp"

namespace fs = std::filesystem;
using namespace minihorn;

namespace {

enum Exit { kOk = 0, kFailed = 1, kUsage = 2, kNotFound = 3, kConflict = 4, kIo = 5 };

/// "4096", "64M", "1G", "1GiB", "512k".
std::uint64_t parse_size(const std::string& text) {
    std::uint64_t value = 0;
    auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || p == text.data()) throw Error(Errc::invalid_argument, fmt::format("bad size '{}'", text));
    std::string unit(p, text.data() + text.size());
    for (auto& c : unit) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    if (unit.ends_with("IB")) unit.resize(unit.size() - 2);
    else if (unit.size() > 1 && unit.ends_with("B")) unit.pop_back();
    int shift = 0;
    if (unit.empty() || unit == "B") shift = 0;
    else if (unit == "K") shift = 10;
    else if (unit == "M") shift = 20;
    else if (unit == "G") shift = 30;
    else if (unit == "T") shift = 40;
    else throw Error(Errc::invalid_argument, fmt::format("bad size unit in '{}'", text));
    if (shift && value > (~0ull >> shift)) throw Error(Errc::invalid_argument, fmt::format("size '{}' overflows", text));
    return value << shift;
}

std::string size_text(std::uint64_t v) {
    for (auto [shift, unit] : {std::pair{40, "T"}, {30, "G"}, {20, "M"}, {10, "K"}}) {
        if (v >= (1ull << shift) && v % (1ull << shift) == 0) return fmt::format("{}{}", v >> shift, unit);
    }
    return std::to_string(v);
}

struct Output {
    bool kv = false;
    void field(std::string_view key, const auto& value, std::string_view label = {}) const {
        if (kv) {
            fmt::print("{}={}\n", key, value);
        } else {
            fmt::print("{:<22}{}\n", fmt::format("{}:", label.empty() ? key : label), value);
        }
    }
};

/// Blocks SIGINT/SIGTERM in every thread created afterwards and waits for one.
class SignalWaiter {
public:
    SignalWaiter() {
        sigemptyset(&set_);
        sigaddset(&set_, SIGINT);
        sigaddset(&set_, SIGTERM);
        pthread_sigmask(SIG_BLOCK, &set_, nullptr);
    }
    int wait() {
        int sig = 0;
        sigwait(&set_, &sig);
        return sig;
    }

private:
    sigset_t set_;
};

struct StoreArgs {
    std::string backend = "null";
    std::string dir;
    std::string device;
    std::string volume;
    std::string size = "1G";
    std::uint32_t block_size = 4096;
    bool no_direct = false;

    void attach(CLI::App* app) {
        app->add_option("--backend", backend, "null | chained_file | dbs")
            ->check(CLI::IsMember({"null", "chained_file", "dbs"}))
            ->capture_default_str();
        app->add_option("--dir", dir, "chained_file directory (created when missing)");
        app->add_option("--device", device, "dbs device file");
        app->add_option("--volume", volume, "dbs volume to serve");
        app->add_option("--size", size, "volume size for null and new chained_file stores")->capture_default_str();
        app->add_option("--block-size", block_size)->capture_default_str();
        app->add_flag("--no-direct", no_direct, "buffered I/O instead of O_DIRECT");
    }

    std::shared_ptr<replica::BackingStore> open() const {
        if (backend == "null") return std::make_shared<replica::NullStore>(parse_size(size), block_size);
        if (backend == "chained_file") {
            if (dir.empty()) throw Error(Errc::invalid_argument, "--dir is required for chained_file");
            replica::ChainedFileOptions o{.versioning = true, .direct_io = !no_direct};
            if (fs::exists(fs::path(dir) / "volume.meta")) return replica::ChainedFileStore::open(dir, o);
            return replica::ChainedFileStore::create(dir, parse_size(size), block_size, o);
        }
        if (device.empty() || volume.empty()) throw Error(Errc::invalid_argument, "--device and --volume are required for dbs");
        std::shared_ptr<dbs::Store> s = dbs::Store::open(device, {.direct_io = !no_direct});
        return std::make_shared<replica::DbsVolumeStore>(std::move(s), volume);
    }
};

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        auto pos = s.find(sep, start);
        out.push_back(s.substr(start, pos - start));
        if (pos == std::string::npos) return out;
        start = pos + 1;
    }
}

void print_volume(const Output& out, const dbs::VolumeInfo& v) {
    out.field("volume", v.name);
    out.field("slot", v.slot);
    out.field("size", v.size);
    out.field("latest_snapshot", v.latest_snapshot_id);
    out.field("chain_length", v.chain.size());
    out.field("owned_extents", v.owned_extents);
    if (out.kv) {
        for (std::size_t i = 0; i < v.chain.size(); ++i) {
            const auto& s = v.chain[i];
            fmt::print("chain.{}.id={}\nchain.{}.parent={}\nchain.{}.volume_slot={}\nchain.{}.owned_extents={}\nchain.{}.written_blocks={}\n",
                       i, s.id, i, s.parent_id, i, s.volume_slot, i, s.owned_extents, i, s.written_blocks);
        }
    } else {
        fmt::print("{:>8} {:>8} {:>6} {:>10} {:>14}\n", "id", "parent", "slot", "extents", "written_blocks");
        for (const auto& s : v.chain) {
            fmt::print("{:>8} {:>8} {:>6} {:>10} {:>14}\n", s.id, s.parent_id, s.volume_slot, s.owned_extents, s.written_blocks);
        }
    }
}

void print_device(const Output& out, const dbs::DeviceReport& r) {
    const auto& g = r.geometry;
    out.field("device_size", g.device_size);
    out.field("block_size", g.block_size);
    out.field("blocks_per_extent", g.blocks_per_extent);
    out.field("extent_size", g.extent_size());
    out.field("max_volumes", g.max_volumes);
    out.field("max_snapshots", g.max_snapshots);
    out.field("data_offset", r.layout.data_offset);
    out.field("total_extents", r.total_extents);
    out.field("free_extents", r.free_extents);
    out.field("free_bytes", r.free_bytes);
    out.field("allocation_mark", r.allocation_mark);
    out.field("next_snapshot_id", r.next_snapshot_id);
    out.field("volumes", r.volumes.size());
    for (std::size_t i = 0; i < r.volumes.size(); ++i) {
        const auto& v = r.volumes[i];
        if (out.kv) {
            fmt::print("volume.{}.name={}\nvolume.{}.size={}\nvolume.{}.chain_length={}\nvolume.{}.latest_snapshot={}\n", i,
                       v.name, i, v.size, i, v.chain.size(), i, v.latest_snapshot_id);
        } else {
            fmt::print("  {:<20} {:>10}  chain {}  latest {}\n", v.name, size_text(v.size), v.chain.size(), v.latest_snapshot_id);
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"minihorn: replicated block storage engine"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string format = "human";
    std::string log_level = "info";
    app.add_option("--format", format, "human | kv")->check(CLI::IsMember({"human", "kv"}))->capture_default_str();
    app.add_option("--log-level", log_level)->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}))->capture_default_str();

    std::string device;
    bool no_direct = false;
    auto add_device = [&](CLI::App* cmd) {
        cmd->add_option("--device", device, "device file or block device")->required();
        cmd->add_flag("--no-direct", no_direct, "buffered I/O instead of O_DIRECT");
    };

    // init
    auto* init = app.add_subcommand("init", "format a device");
    add_device(init);
    std::string init_size;
    dbs::DeviceGeometry geo;
    bool force = false;
    init->add_option("--size", init_size, "device size; creates or grows a sparse file");
    init->add_option("--block-size", geo.block_size)->capture_default_str();
    init->add_option("--blocks-per-extent", geo.blocks_per_extent)->capture_default_str();
    init->add_option("--max-volumes", geo.max_volumes)->capture_default_str();
    init->add_option("--max-snapshots", geo.max_snapshots)->capture_default_str();
    init->add_flag("--force", force, "overwrite an existing format");

    // volume
    auto* volume = app.add_subcommand("volume", "volume administration");
    volume->require_subcommand(1);
    std::string name, new_name, vsize;
    auto* vcreate = volume->add_subcommand("create", "create a volume");
    add_device(vcreate);
    vcreate->add_option("name", name)->required();
    vcreate->add_option("size", vsize)->required();
    auto* vdelete = volume->add_subcommand("delete", "delete a volume and its snapshots");
    add_device(vdelete);
    vdelete->add_option("name", name)->required();
    auto* vrename = volume->add_subcommand("rename", "rename a volume");
    add_device(vrename);
    vrename->add_option("name", name)->required();
    vrename->add_option("new_name", new_name)->required();
    auto* vlist = volume->add_subcommand("list", "list volumes");
    add_device(vlist);

    // snapshot
    auto* snapshot = app.add_subcommand("snapshot", "snapshot administration");
    snapshot->require_subcommand(1);
    dbs::SnapshotId snap_id = 0;
    auto* screate = snapshot->add_subcommand("create", "freeze the volume's latest snapshot");
    add_device(screate);
    screate->add_option("volume", name)->required();
    auto* sdelete = snapshot->add_subcommand("delete", "delete a non-latest snapshot");
    add_device(sdelete);
    sdelete->add_option("volume", name)->required();
    sdelete->add_option("id", snap_id)->required();
    auto* sclone = snapshot->add_subcommand("clone", "new volume on top of a snapshot");
    add_device(sclone);
    sclone->add_option("volume", name)->required();
    sclone->add_option("id", snap_id)->required();
    sclone->add_option("new_name", new_name)->required();
    auto* slist = snapshot->add_subcommand("list", "show a volume's chain");
    add_device(slist);
    slist->add_option("volume", name)->required();

    // info
    auto* info = app.add_subcommand("info", "device or volume metadata");
    add_device(info);
    info->add_option("volume", name);

    // replica serve
    auto* replica_cmd = app.add_subcommand("replica", "replica process");
    replica_cmd->require_subcommand(1);
    auto* rserve = replica_cmd->add_subcommand("serve", "serve a backing store over dataconn");
    std::string listen = "127.0.0.1:9502";
    StoreArgs store_args;
    replica::ServerOptions ropts;
    rserve->add_option("--listen", listen)->capture_default_str();
    store_args.attach(rserve);
    rserve->add_option("--workers", ropts.workers)->capture_default_str();
    rserve->add_option("--max-in-flight", ropts.max_in_flight)->capture_default_str();

    // controller serve
    auto* controller_cmd = app.add_subcommand("controller", "controller process");
    controller_cmd->require_subcommand(1);
    auto* cserve = controller_cmd->add_subcommand("serve", "controller with an NBD frontend");
    std::vector<std::string> replica_addrs;
    std::string strategy = "token";
    std::string csize;
    controller::ControllerConfig ccfg;
    std::string export_name = "minihorn";
    std::string nbd_listen = "127.0.0.1:10809";
    cserve->add_option("--replica", replica_addrs, "replica address host:port (repeatable)");
    cserve->add_option("--strategy", strategy, "legacy | token")->check(CLI::IsMember({"legacy", "token"}))->capture_default_str();
    cserve->add_option("--connections", ccfg.connections, "connections per replica")->capture_default_str();
    cserve->add_option("--capacity", ccfg.capacity, "in-flight ids per replica (token)")->capture_default_str();
    cserve->add_option("--size", csize, "volume size")->required();
    cserve->add_option("--block-size", ccfg.block_size)->capture_default_str();
    cserve->add_flag("--null-backend", ccfg.null_backend, "complete I/O at the controller");
    cserve->add_option("--listen", nbd_listen, "NBD listen address")->capture_default_str();
    cserve->add_option("--export-name", export_name)->capture_default_str();

    // nbd serve
    auto* nbd_cmd = app.add_subcommand("nbd", "NBD export");
    nbd_cmd->require_subcommand(1);
    auto* nserve = nbd_cmd->add_subcommand("serve", "export a local backing store over NBD, no replicas");
    nserve->add_option("--listen", nbd_listen)->capture_default_str();
    nserve->add_option("--export-name", export_name)->capture_default_str();
    store_args.attach(nserve);

    // bench
    auto* bench_cmd = app.add_subcommand("bench", "layered benchmark matrix on loopback replicas");
    bench::MatrixConfig mcfg;
    std::vector<std::string> rows, workloads, variants;
    std::string bench_size = "256M", frontend_kind = "direct", output_file;
    std::string bench_format = "table";
    bool check_monotonic = false;
    bench_cmd->add_option("--rows", rows, "null_backend, null_storage, full_engine");
    bench_cmd->add_option("--workloads", workloads, "iops_4k_rand_read, iops_4k_rand_write, bw_1m_seq_read, bw_1m_seq_write");
    bench_cmd->add_option("--variants", variants, "strategy/backend, e.g. token/dbs");
    bench_cmd->add_option("--replicas", mcfg.replicas)->capture_default_str();
    bench_cmd->add_option("--connections", mcfg.connections, "0 = 2 for legacy, 6 for token")->capture_default_str();
    bench_cmd->add_option("--capacity", mcfg.capacity)->capture_default_str();
    bench_cmd->add_option("--size", bench_size, "volume size")->capture_default_str();
    bench_cmd->add_option("--iops-qd", mcfg.iops_queue_depth)->capture_default_str();
    bench_cmd->add_option("--bw-qd", mcfg.bw_queue_depth)->capture_default_str();
    bench_cmd->add_option("--queues", mcfg.num_queues)->capture_default_str();
    bench_cmd->add_option("--duration", mcfg.duration_s, "seconds per cell")->capture_default_str();
    bench_cmd->add_option("--ops", mcfg.ops, "ops per cell, overrides --duration");
    bench_cmd->add_option("--seed", mcfg.seed)->capture_default_str();
    bench_cmd->add_option("--frontend", frontend_kind, "direct | nbd")->check(CLI::IsMember({"direct", "nbd"}))->capture_default_str();
    bench_cmd->add_option("--work-dir", mcfg.work_dir, "where chained_file and dbs replicas keep their files");
    bench_cmd->add_flag("--no-direct", no_direct, "buffered I/O in the replicas");
    bench_cmd->add_option("--output", output_file, "also write key=value results here");
    bench_cmd->add_option("--report", bench_format, "table | kv | both")->check(CLI::IsMember({"table", "kv", "both"}))->capture_default_str();
    bench_cmd->add_flag("--check-monotonic", check_monotonic, "exit 1 when a layer beats the one above it by more than 5%");

    // bench against a running NBD export
    auto* load_cmd = app.add_subcommand("load", "run one workload against an NBD export");
    std::string target = "127.0.0.1:10809";
    std::string pattern = "rand_read";
    frontend::WorkloadSpec wspec;
    load_cmd->add_option("--target", target, "NBD server host:port")->capture_default_str();
    load_cmd->add_option("--export-name", export_name)->capture_default_str();
    load_cmd->add_option("--pattern", pattern, "rand_read | rand_write | seq_read | seq_write | mixed")->capture_default_str();
    load_cmd->add_option("--io-size", wspec.io_size)->capture_default_str();
    load_cmd->add_option("--qd", wspec.queue_depth)->capture_default_str();
    load_cmd->add_option("--queues", wspec.num_queues)->capture_default_str();
    load_cmd->add_option("--ops", wspec.ops);
    load_cmd->add_option("--duration", wspec.duration_s)->capture_default_str();
    load_cmd->add_option("--seed", wspec.seed)->capture_default_str();
    load_cmd->add_option("--read-pct", wspec.read_pct)->capture_default_str();
    load_cmd->add_flag("--verify", wspec.verify);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    spdlog::set_level(spdlog::level::from_str(log_level));
    const Output out{format == "kv"};

    try {
        const dbs::OpenOptions open_opts{.direct_io = !no_direct};
        auto open_store = [&] { return dbs::Store::open(device, open_opts); };

        if (*init) {
            if (!init_size.empty()) {
                const std::uint64_t want = parse_size(init_size);
                if (!fs::exists(device)) { std::ofstream(device, std::ios::binary); }
                if (fs::is_regular_file(device) && fs::file_size(device) < want) fs::resize_file(device, want);
                geo.device_size = want;
            }
            const auto sb = dbs::Store::init(device, geo, {.force = force, .direct_io = !no_direct});
            print_device(out, open_store()->query());
            (void)sb;
        } else if (*vcreate) {
            print_volume(out, open_store()->create_volume(name, parse_size(vsize)));
        } else if (*vdelete) {
            open_store()->delete_volume(name);
        } else if (*vrename) {
            open_store()->rename_volume(name, new_name);
        } else if (*vlist) {
            const auto r = open_store()->query();
            for (std::size_t i = 0; i < r.volumes.size(); ++i) {
                const auto& v = r.volumes[i];
                if (out.kv) {
                    fmt::print("volume.{}.name={}\nvolume.{}.size={}\nvolume.{}.chain_length={}\n", i, v.name, i, v.size, i, v.chain.size());
                } else {
                    fmt::print("{:<24} {:>10}  chain {}\n", v.name, size_text(v.size), v.chain.size());
                }
            }
        } else if (*screate) {
            const auto s = open_store()->create_snapshot(name);
            out.field("snapshot", s.id);
            out.field("parent", s.parent_id);
        } else if (*sdelete) {
            open_store()->delete_snapshot(name, snap_id);
        } else if (*sclone) {
            print_volume(out, open_store()->clone_snapshot(name, snap_id, new_name));
        } else if (*slist) {
            print_volume(out, open_store()->query(name));
        } else if (*info) {
            auto s = open_store();
            if (name.empty()) {
                print_device(out, s->query());
            } else {
                print_volume(out, s->query(name));
            }
        } else if (*rserve) {
            SignalWaiter signals;
            replica::ReplicaServer server(store_args.open(), net::parse_endpoint(listen), ropts);
            fmt::print("replica serving {} on {}\n", server.store().describe(), server.endpoint().to_string());
            std::fflush(stdout);
            signals.wait();
            server.stop();
        } else if (*cserve) {
            SignalWaiter signals;
            ccfg.strategy = controller::parse_strategy(strategy);
            ccfg.volume_size = parse_size(csize);
            for (const auto& a : replica_addrs) ccfg.replicas.push_back(net::parse_endpoint(a));
            auto ctl = controller::Controller::start(ccfg);
            nbd::Server server(*ctl, net::parse_endpoint(nbd_listen), {.export_name = export_name});
            fmt::print("controller ({}, {} replicas) exporting '{}' over NBD on {}\n", controller::to_string(ccfg.strategy),
                       ccfg.replicas.size(), export_name, server.endpoint().to_string());
            std::fflush(stdout);
            signals.wait();
            server.stop();
        } else if (*nserve) {
            SignalWaiter signals;
            auto store = store_args.open();
            nbd::Server server(*store, net::parse_endpoint(nbd_listen), {.export_name = export_name});
            fmt::print("exporting {} as '{}' over NBD on {}\n", store->describe(), export_name, server.endpoint().to_string());
            std::fflush(stdout);
            signals.wait();
            server.stop();
        } else if (*bench_cmd) {
            if (!rows.empty()) {
                mcfg.rows.clear();
                for (const auto& r : rows) mcfg.rows.push_back(bench::parse_layer(r));
            }
            if (!workloads.empty()) {
                mcfg.workloads.clear();
                for (const auto& w : workloads) mcfg.workloads.push_back(bench::parse_workload(w));
            }
            if (!variants.empty()) {
                mcfg.variants.clear();
                for (const auto& v : variants) {
                    auto parts = split(v, '/');
                    if (parts.size() != 2) throw Error(Errc::invalid_argument, fmt::format("variant '{}' is not strategy/backend", v));
                    mcfg.variants.push_back({controller::parse_strategy(parts[0]), bench::parse_backend(parts[1])});
                }
            }
            mcfg.volume_size = parse_size(bench_size);
            mcfg.frontend = bench::parse_frontend(frontend_kind);
            mcfg.direct_io = !no_direct;
            const auto report = bench::run_matrix(mcfg, [](const bench::Cell& c) {
                spdlog::info("{} {} {}: {}", bench::to_string(c.workload), bench::to_string(c.layer), c.variant.name(),
                             c.ok ? fmt::format("{:.1f}", c.headline()) : "failed: " + c.error);
            });
            if (bench_format != "kv") fmt::print("{}", report.table());
            if (bench_format != "table") fmt::print("{}", report.key_values());
            if (!output_file.empty()) {
                std::ofstream f(output_file);
                f << report.key_values();
                if (!f) throw Error(Errc::io, fmt::format("cannot write {}", output_file));
            }
            const auto violations = report.monotonicity_violations(0.05);
            for (const auto& v : violations) fmt::print(stderr, "monotonicity: {}\n", v);
            bool any_failed = false;
            for (const auto& c : report.cells) any_failed |= !c.ok;
            if (any_failed || (check_monotonic && !violations.empty())) return kFailed;
        } else if (*load_cmd) {
            wspec.pattern = frontend::parse_pattern(pattern);
            auto client = nbd::Client::connect(net::parse_endpoint(target), export_name);
            const auto r = frontend::run_workload(*client, wspec);
            if (out.kv) {
                fmt::print("{}", frontend::report_key_values(r));
            } else {
                fmt::print("{}", frontend::format_report(r));
            }
            if (!r.ok()) return kIo;
        }
    } catch (const Error& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return minihorn::exit_code(e.code());
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return kIo;
    }
    return kOk;
}
