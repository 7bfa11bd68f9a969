// Acceptance run: one PASS/FAIL line per criterion, details indented below it.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <spdlog/spdlog.h>

#include "cluster.hpp"
#include "dbs_model.hpp"
#include "dbs_oracle.hpp"
#include "minihorn/bench/matrix.hpp"
#include "minihorn/controller/controller.hpp"
#include "minihorn/dataconn/message.hpp"
#include "minihorn/dbs/store.hpp"
#include "minihorn/error.hpp"
#include "minihorn/frontend/nbd.hpp"
#include "minihorn/frontend/workload.hpp"
#include "minihorn/replica/backing_store.hpp"
#include "minihorn/replica/chained_file.hpp"
#include "minihorn/replica/server.hpp"
#include "nbd_peer.hpp"
#include "pattern.hpp"
#include "temp_dir.hpp"

using namespace minihorn;
using namespace minihorn::testing;
using Clock = std::chrono::steady_clock;

namespace {

// ---- pinned parameters ----
constexpr std::uint64_t kOracleOps = 100'000;
constexpr std::uint32_t kOracleMaxVolumes = 8;
constexpr std::uint32_t kOracleMaxChain = 100;
constexpr std::uint64_t kOracleVolumeSize = 64ull << 20;
constexpr int kReopenSessions = 100;
constexpr std::uint64_t kReopenOpsPerSession = 300;
constexpr std::uint64_t kTokenSubmissions = 100'000;
constexpr std::uint32_t kTokenCapacity = 64;
constexpr double kLayerNoise = 0.05;
constexpr std::uint32_t kDispatchQueueDepth = 64;
constexpr int kDispatchRuns = 5;
constexpr double kDispatchSeconds = 4.0;
constexpr double kWelchCritical = 2.306;  // two-sided 5%, df 8
constexpr double kDepthTolerance = 0.10;
constexpr double kProbeRatio = 2.0;
constexpr int kChainDepth = 100;
constexpr std::uint64_t kFuzzFrames = 1'000'000;
constexpr std::uint64_t kFuzzStreams = 20'000;
constexpr double kReadAfterFailSlackMs = 5.0;

constexpr std::uint32_t kBlock = 4096;
constexpr std::uint64_t kMiB = 1ull << 20;

struct Outcome {
    bool pass = true;
    std::vector<std::string> notes;

    void check(bool ok, std::string what) {
        if (!ok) pass = false;
        notes.push_back(fmt::format("{} {}", ok ? "ok  " : "FAIL", what));
    }
    void note(std::string what) { notes.push_back("     " + std::move(what)); }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::unique_ptr<dbs::Store> fresh_device(const TempDir& dir, const std::string& name, std::uint64_t size,
                                         dbs::DeviceGeometry geo) {
    const auto path = make_sparse_file(dir / name, size);
    geo.device_size = 0;
    dbs::Store::init(path, geo);
    return dbs::Store::open(path);
}

std::size_t longest_chain(const dbs::Store& s) {
    std::size_t n = 0;
    for (const auto& v : s.query().volumes) n = std::max(n, v.chain.size());
    return n;
}

// Owned extents appear in exactly one snapshot map, the rest are free. Returns
// the number of problems.
std::size_t conservation_problems(const dbs::Store& store) {
    const auto dump = store.dump_index();
    std::set<std::uint32_t> seen;
    std::size_t bad = 0;
    for (const auto& [sid, m] : dump.snapshot_maps) {
        for (const auto& [lext, phys] : m) bad += !seen.insert(phys).second || phys >= dump.allocation_mark;
    }
    for (auto f : dump.free_extents) bad += !seen.insert(f).second;
    bad += seen.size() != store.layout().extent_count;
    return bad;
}

// 1 ------------------------------------------------------------------------
Outcome dbs_oracle_equivalence() {
    Outcome o;
    TempDir dir;
    dbs::DeviceGeometry geo;
    geo.blocks_per_extent = 16;
    geo.max_volumes = kOracleMaxVolumes;
    geo.max_snapshots = 4096;
    auto store = fresh_device(dir, "dev.img", 16ull << 30, geo);
    DbsModel model(kBlock, geo.max_volumes, geo.max_snapshots);
    OracleConfig cfg;
    cfg.max_volumes = kOracleMaxVolumes;
    cfg.volume_size = kOracleVolumeSize;
    cfg.max_chain = kOracleMaxChain;
    DbsOracle oracle(*store, model, 20240601, cfg);

    const auto t0 = Clock::now();
    std::size_t deepest = 0, leaks = 0;
    // Last 40% of the run leans on snapshots so chains reach the cap. Full
    // images are compared at each checkpoint.
    for (std::uint64_t done = 0; done < kOracleOps && oracle.stats().mismatches == 0; done += 10'000) {
        oracle.config().snapshot_bias = done >= kOracleOps * 6 / 10 ? 0.15 : 0.0;
        oracle.run(10'000);
        oracle.verify_all();
        leaks += conservation_problems(*store);
        deepest = std::max(deepest, longest_chain(*store));
    }
    oracle.verify_all();
    const auto& st = oracle.stats();
    o.check(st.ops >= kOracleOps, fmt::format("{} operations (need >= {})", st.ops, kOracleOps));
    o.check(st.mismatches == 0, fmt::format("{} read mismatches over {} reads / {} blocks checked{}", st.mismatches,
                                            st.reads, st.blocks_checked,
                                            st.first_failure.empty() ? "" : ": " + st.first_failure));
    o.check(leaks == 0, fmt::format("extent conservation held at every checkpoint ({} problems)", leaks));
    std::string kinds;
    for (const auto& [k, n] : st.by_kind) kinds += fmt::format("{}={} ", k, n);
    o.note(fmt::format("mix: {}", kinds));
    o.note(fmt::format("expected error outcomes matched: {}; deepest chain seen: {} (cap {})", st.expected_errors,
                       deepest, kOracleMaxChain));
    o.note(fmt::format("runtime {:.1f} s", seconds_since(t0)));
    return o;
}

// 2 ------------------------------------------------------------------------
Outcome reopen_reconstruction() {
    Outcome o;
    TempDir dir;
    dbs::DeviceGeometry geo;
    geo.blocks_per_extent = 16;
    geo.max_volumes = 8;
    geo.max_snapshots = 1024;
    const auto path = make_sparse_file(dir / "dev.img", 4ull << 30);
    dbs::Store::init(path, geo);
    auto store = dbs::Store::open(path);
    DbsModel model(kBlock, geo.max_volumes, geo.max_snapshots);
    OracleConfig cfg;
    cfg.volume_size = 4 * kMiB;
    cfg.max_chain = 100;
    DbsOracle oracle(*store, model, 77, cfg);

    auto images = [](const dbs::Store& s) {
        std::map<std::string, std::vector<std::byte>> out;
        for (const auto& v : s.query().volumes) {
            auto& img = out[v.name];
            img.resize(v.size);
            s.read(v.name, 0, img);
        }
        return out;
    };

    int identical = 0, index_equal = 0;
    std::string first_bad;
    for (int session = 0; session < kReopenSessions; ++session) {
        oracle.run(kReopenOpsPerSession);
        const auto before = images(*store);
        const auto index = store->dump_index();
        store.reset();  // clean close
        store = dbs::Store::open(path);
        oracle.rebind(*store);
        const auto after = images(*store);
        if (before == after && !before.empty()) {
            ++identical;
        } else if (first_bad.empty()) {
            first_bad = fmt::format("session {}", session);
        }
        index_equal += store->dump_index() == index;
    }
    oracle.verify_all();
    o.check(identical == kReopenSessions,
            fmt::format("{}/{} sessions byte-identical after reopen{}", identical, kReopenSessions,
                        first_bad.empty() ? "" : " (first difference: " + first_bad + ")"));
    o.check(index_equal == kReopenSessions, fmt::format("{}/{} sessions with identical rebuilt extent index", index_equal, kReopenSessions));
    o.check(oracle.stats().mismatches == 0,
            fmt::format("reopened images agree with the reference model ({} mismatches)", oracle.stats().mismatches));
    return o;
}

// 3 ------------------------------------------------------------------------
Outcome token_accounting() {
    Outcome o;
    LocalReplica rep(std::make_shared<replica::NullStore>(256 * kMiB, kBlock));
    WireChecker checker(kTokenCapacity);
    controller::ControllerConfig cfg;
    cfg.replicas = {rep.endpoint()};
    cfg.strategy = controller::Strategy::token;
    cfg.capacity = kTokenCapacity;
    cfg.volume_size = 256 * kMiB;
    cfg.wire_tap = checker.tap();
    auto ctl = controller::Controller::start(cfg);

    frontend::WorkloadSpec w;
    w.pattern = frontend::Pattern::mixed;
    w.queue_depth = 128;  // more submitters than ids, so acquire has to block
    w.ops = kTokenSubmissions;
    const auto r = frontend::run_workload(*ctl, w);
    const auto status = ctl->replicas().at(0);
    o.check(r.ok() && r.ops == kTokenSubmissions, fmt::format("{} submissions completed, {} errors", r.ops, r.errors));
    o.check(status.tokens_available == kTokenCapacity,
            fmt::format("pool holds {} ids afterwards (capacity {})", status.tokens_available, kTokenCapacity));
    o.check(checker.sent() == checker.received() && checker.sent() == kTokenSubmissions,
            fmt::format("{} requests on the wire, {} replies: each id completed exactly once", checker.sent(), checker.received()));
    o.check(checker.violations() == 0, fmt::format("{} wire-tap violations (duplicate in-flight id, id >= capacity, or unmatched reply)",
                                                   checker.violations()));
    o.check(checker.max_in_flight() <= kTokenCapacity, fmt::format("peak in-flight ids {}", checker.max_in_flight()));
    o.check(status.stray_responses == 0, fmt::format("{} stray responses", status.stray_responses));
    return o;
}

// 4 ------------------------------------------------------------------------
Outcome strategy_equivalence() {
    Outcome o;
    constexpr std::uint64_t kSize = 32 * kMiB;
    std::map<std::string, std::vector<std::vector<std::byte>>> images;
    for (auto strategy : {controller::Strategy::legacy, controller::Strategy::token}) {
        std::vector<std::shared_ptr<MemoryStore>> mem;
        std::vector<std::unique_ptr<LocalReplica>> reps;
        controller::ControllerConfig cfg;
        for (int i = 0; i < 2; ++i) {
            mem.push_back(std::make_shared<MemoryStore>(kSize, kBlock));
            reps.push_back(std::make_unique<LocalReplica>(mem.back()));
            cfg.replicas.push_back(reps.back()->endpoint());
        }
        cfg.strategy = strategy;
        cfg.volume_size = kSize;
        auto ctl = controller::Controller::start(cfg);
        frontend::WorkloadSpec w;
        w.pattern = frontend::Pattern::rand_write;
        w.queue_depth = 16;
        w.ops = 40'000;
        w.verify = true;  // tagged contents: block, generation, seed
        w.seed = 4242;
        auto r = frontend::run_workload(*ctl, w);
        o.check(r.ok(), fmt::format("{}: {} writes, {} errors", controller::to_string(strategy), r.ops, r.errors));
        w.pattern = frontend::Pattern::seq_read;
        w.ops = kSize / kBlock;
        r = frontend::run_workload(*ctl, w);
        o.check(r.ok(), fmt::format("{}: verified read-back of {} blocks", controller::to_string(strategy), r.verified_blocks));
        ctl.reset();
        for (auto& m : mem) images[controller::to_string(strategy)].push_back(m->image());
    }
    const auto& l = images["legacy"];
    const auto& t = images["token"];
    const bool nonzero = std::any_of(t[0].begin(), t[0].end(), [](std::byte b) { return b != std::byte{0}; });
    o.check(l[0] == l[1] && t[0] == t[1], "replicas mirror each other under both strategies");
    o.check(l[0] == t[0] && nonzero, "legacy and token images byte-identical");
    return o;
}

// 5 ------------------------------------------------------------------------
Outcome mirroring_and_failover() {
    Outcome o;
    constexpr std::uint64_t kSize = 32 * kMiB;
    {
        std::vector<std::shared_ptr<MemoryStore>> mem;
        std::vector<std::unique_ptr<LocalReplica>> reps;
        controller::ControllerConfig cfg;
        for (int i = 0; i < 2; ++i) {
            mem.push_back(std::make_shared<MemoryStore>(kSize, kBlock));
            reps.push_back(std::make_unique<LocalReplica>(mem.back()));
            cfg.replicas.push_back(reps.back()->endpoint());
        }
        cfg.volume_size = kSize;
        auto ctl = controller::Controller::start(cfg);
        frontend::WorkloadSpec w;
        w.verify = true;
        w.seed = 5;
        w.queue_depth = 16;
        std::uint64_t failures = 0, verified = 0;
        for (auto [p, ops] : {std::pair{frontend::Pattern::seq_write, kSize / kBlock}, {frontend::Pattern::mixed, 40'000ull},
                              {frontend::Pattern::seq_read, kSize / kBlock}}) {
            w.pattern = p;
            w.ops = ops;
            const auto r = frontend::run_workload(*ctl, w);
            failures += r.verify_failures + r.errors;
            verified += r.verified_blocks;
        }
        o.check(failures == 0, fmt::format("two healthy replicas: {} verification failures/errors over {} verified blocks", failures, verified));
        ctl.reset();
        o.check(mem[0]->image() == mem[1]->image(), "replica images byte-identical after the run");
    }
    {
        std::vector<std::shared_ptr<MemoryStore>> mem;
        std::vector<std::unique_ptr<LocalReplica>> reps;
        std::mutex ev_mu;
        std::vector<std::pair<Clock::time_point, bool>> reads_to_victim;  // (when, during final pass)
        std::atomic<bool> final_pass{false};
        controller::ControllerConfig cfg;
        for (int i = 0; i < 2; ++i) {
            mem.push_back(std::make_shared<MemoryStore>(kSize, kBlock));
            reps.push_back(std::make_unique<LocalReplica>(mem.back()));
            cfg.replicas.push_back(reps.back()->endpoint());
        }
        cfg.volume_size = kSize;
        cfg.wire_tap = [&](const controller::WireEvent& e) {
            if (e.outbound && e.replica == 1 && e.type == dataconn::MsgType::read) {
                std::lock_guard lk(ev_mu);
                reads_to_victim.emplace_back(Clock::now(), final_pass.load());
            }
        };
        auto ctl = controller::Controller::start(cfg);
        frontend::WorkloadSpec w;
        w.verify = true;
        w.seed = 6;
        w.queue_depth = 16;
        w.pattern = frontend::Pattern::seq_write;
        w.ops = kSize / kBlock;
        const auto pre = frontend::run_workload(*ctl, w);
        o.check(pre.ok(), "prefill on two replicas");

        // Kill replica 1 once it has served a third of the run's writes.
        const auto writes_before = reps[1]->server->stats().writes;
        std::atomic<bool> done{false};
        bool killed_mid_run = false;
        Clock::time_point observed_failure{};
        std::thread killer([&] {
            while (!done && reps[1]->server->stats().writes < writes_before + 6'000) std::this_thread::sleep_for(std::chrono::microseconds(200));
            killed_mid_run = !done;
            reps[1]->server->stop();
            while (!done && ctl->healthy_replicas() == 2) std::this_thread::sleep_for(std::chrono::microseconds(200));
            observed_failure = Clock::now();
        });
        w.pattern = frontend::Pattern::mixed;
        w.ops = 40'000;
        const auto mid = frontend::run_workload(*ctl, w);
        done = true;
        killer.join();
        o.check(killed_mid_run, "replica 1 stopped while the workload was running");
        o.check(mid.ok() && mid.ops == w.ops,
                fmt::format("workload across the kill completed: {} ops, {} errors, {} verification failures{}", mid.ops,
                            mid.errors, mid.verify_failures, mid.first_error.empty() ? "" : " (" + mid.first_error + ")"));
        o.check(ctl->healthy_replicas() == 1, fmt::format("controller reports {} healthy replica(s)", ctl->healthy_replicas()));

        final_pass = true;
        w.pattern = frontend::Pattern::seq_read;
        w.ops = kSize / kBlock;
        const auto post = frontend::run_workload(*ctl, w);
        o.check(post.ok() && post.verified_blocks == kSize / kBlock,
                fmt::format("full verified read-back after the kill: {} blocks, {} failures", post.verified_blocks, post.verify_failures));
        std::size_t late = 0, in_final = 0;
        {
            std::lock_guard lk(ev_mu);
            for (auto [t, fin] : reads_to_victim) {
                in_final += fin;
                if (t > observed_failure + std::chrono::duration<double, std::milli>(kReadAfterFailSlackMs)) ++late;
            }
        }
        o.check(late == 0 && in_final == 0,
                fmt::format("reads routed to the dead replica after failure: {} (slack {} ms), during read-back: {}", late,
                            kReadAfterFailSlackMs, in_final));
    }
    return o;
}

// 6 ------------------------------------------------------------------------
Outcome layer_monotonicity() {
    Outcome o;
    TempDir dir;
    bench::MatrixConfig cfg;
    cfg.workloads = {bench::Workload::iops_4k_rand_read, bench::Workload::iops_4k_rand_write};
    cfg.volume_size = 128 * kMiB;
    cfg.duration_s = 1.5;
    cfg.work_dir = dir.path();
    const auto r = bench::run_matrix(cfg);
    bool all_ok = true;
    for (const auto& c : r.cells) all_ok &= c.ok;
    o.check(all_ok, fmt::format("{} cells measured", r.cells.size()));
    const auto violations = r.monotonicity_violations(kLayerNoise);
    for (const auto& v : violations) o.note("violation: " + v);
    o.check(violations.empty(), fmt::format("null_backend >= null_storage >= full_engine for every variant ({}% noise allowed)",
                                            kLayerNoise * 100));
    std::string table = r.table();
    std::size_t start = 0;
    while (start < table.size()) {
        auto end = table.find('\n', start);
        if (end == std::string::npos) end = table.size();
        if (end > start) o.note(table.substr(start, end - start));
        start = end + 1;
    }
    return o;
}

// 7 ------------------------------------------------------------------------
Outcome dispatcher_ordering() {
    Outcome o;
    bench::MatrixConfig cfg;
    cfg.iops_queue_depth = kDispatchQueueDepth;
    cfg.duration_s = kDispatchSeconds;
    cfg.volume_size = 256 * kMiB;
    std::vector<double> legacy, token;
    // One throwaway cell first; the first measurement after startup tends to run slow.
    bench::run_cell(cfg, bench::Layer::null_storage, bench::Workload::iops_4k_rand_read,
                    {controller::Strategy::token, bench::Backend::null});
    for (int i = 0; i < kDispatchRuns; ++i) {
        cfg.seed = static_cast<std::uint64_t>(i + 1);
        // Alternate the order so slow drift does not favour one side.
        for (int k = 0; k < 2; ++k) {
            const bool tok = (i + k) % 2 == 1;
            const bench::Variant v{tok ? controller::Strategy::token : controller::Strategy::legacy, bench::Backend::null};
            const auto r = bench::run_cell(cfg, bench::Layer::null_storage, bench::Workload::iops_4k_rand_read, v);
            (tok ? token : legacy).push_back(r.iops);
        }
    }
    auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
    auto var = [&](const std::vector<double>& v) {
        const double m = mean(v);
        double s = 0;
        for (double x : v) s += (x - m) * (x - m);
        return s / static_cast<double>(v.size() - 1);
    };
    auto rounded = [](const std::vector<double>& v) {
        std::vector<long> r;
        for (double x : v) r.push_back(std::lround(x));
        return r;
    };
    const double ml = mean(legacy), mt = mean(token);
    const double se = std::sqrt(var(legacy) / legacy.size() + var(token) / token.size());
    const double t = se > 0 ? (mt - ml) / se : (mt > ml ? INFINITY : 0.0);
    o.note(fmt::format("legacy ({} conns): {}", bench::default_connections(controller::Strategy::legacy),
                       fmt::join(rounded(legacy), " ")));
    o.note(fmt::format("token  ({} conns): {}", bench::default_connections(controller::Strategy::token),
                       fmt::join(rounded(token), " ")));
    o.note(fmt::format("ratio token/legacy = {:.2f}", mt / ml));
    {
        // Paired view, reported only: pairs share whatever the machine was doing.
        std::vector<double> diff(legacy.size());
        for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = token[i] - legacy[i];
        const double sd = std::sqrt(var(diff));
        o.note(fmt::format("token won {}/{} pairs, paired t = {:.2f}",
                           std::count_if(diff.begin(), diff.end(), [](double d) { return d > 0; }), diff.size(),
                           sd > 0 ? mean(diff) / (sd / std::sqrt(static_cast<double>(diff.size()))) : 0.0));
    }
    o.check(mt > ml && t >= kWelchCritical,
            fmt::format("IOPS(token) {:.0f} > IOPS(legacy) {:.0f} at qd {}, Welch t = {:.2f} (need >= {})", mt, ml,
                        kDispatchQueueDepth, t, kWelchCritical));
    return o;
}

// 8 ------------------------------------------------------------------------

// Base image everywhere, then each further level freezes the chain and
// overwrites a scattered 1% of the blocks.
void build_chain(BlockTarget& t, const std::function<void()>& snapshot, int depth) {
    const std::uint64_t blocks = t.size() / kBlock;
    frontend::WorkloadSpec fill;
    fill.pattern = frontend::Pattern::seq_write;
    fill.io_size = 1 * kMiB;
    fill.ops = t.size() / fill.io_size;
    fill.verify = true;
    fill.queue_depth = 1;
    frontend::run_workload(t, fill);
    std::mt19937_64 rng(8);
    std::vector<std::byte> buf(kBlock);
    for (int level = 1; level < depth; ++level) {
        snapshot();
        for (std::uint64_t i = 0; i < blocks / 100; ++i) {
            const std::uint64_t b = rng() % blocks;
            fill_block(buf, b * 1000 + static_cast<std::uint64_t>(level));
            t.write(b * kBlock, buf);
        }
    }
}

double median_read_iops(BlockTarget& t, std::uint64_t seed) {
    std::vector<double> v;
    for (int i = 0; i < 3; ++i) {
        frontend::WorkloadSpec w;
        w.pattern = frontend::Pattern::rand_read;
        w.queue_depth = 8;
        w.duration_s = 1.5;
        w.seed = seed + static_cast<std::uint64_t>(i);
        v.push_back(frontend::run_workload(t, w).iops);
    }
    std::sort(v.begin(), v.end());
    return v[1];
}

Outcome snapshot_depth() {
    Outcome o;
    TempDir dir;
    constexpr std::uint64_t kSize = 64 * kMiB;
    dbs::DeviceGeometry geo;
    geo.blocks_per_extent = 16;
    geo.max_volumes = 4;
    geo.max_snapshots = 256;
    std::shared_ptr<dbs::Store> store = fresh_device(dir, "dev.img", 4ull << 30, geo);
    store->create_volume("shallow", kSize);
    store->create_volume("deep", kSize);
    replica::DbsVolumeStore shallow(store, "shallow"), deep(store, "deep");
    build_chain(shallow, [] {}, 1);
    build_chain(deep, [&] { store->create_snapshot("deep"); }, kChainDepth);
    const auto depth_shallow = store->query("shallow").chain.size();
    const auto depth_deep = store->query("deep").chain.size();
    o.note(fmt::format("dbs chain lengths: {} and {}", depth_shallow, depth_deep));
    double d1 = 0, d100 = 0;
    {
        std::vector<double> a, b;
        for (int round = 0; round < 2; ++round) {
            a.push_back(median_read_iops(shallow, 10 + round));
            b.push_back(median_read_iops(deep, 10 + round));
        }
        d1 = (a[0] + a[1]) / 2;
        d100 = (b[0] + b[1]) / 2;
    }
    const double rel = std::abs(d100 - d1) / d1;
    o.check(depth_deep == static_cast<std::size_t>(kChainDepth) && rel <= kDepthTolerance,
            fmt::format("dbs random-read IOPS depth 1 = {:.0f}, depth {} = {:.0f} ({:+.1f}%, allowed +-{:.0f}%)", d1, depth_deep,
                        d100, (d100 / d1 - 1) * 100, kDepthTolerance * 100));

    auto one = replica::ChainedFileStore::create(dir / "cf1", kSize, kBlock);
    auto many = replica::ChainedFileStore::create(dir / "cf100", kSize, kBlock);
    build_chain(*one, [] {}, 1);
    build_chain(*many, [&] { many->snapshot(); }, kChainDepth);
    one->reset_counters();
    many->reset_counters();
    const double c1 = median_read_iops(*one, 20);
    const double c100 = median_read_iops(*many, 20);
    auto files_per_lookup = [](const replica::ChainedFileStats& s) {
        return s.block_lookups ? 1.0 + static_cast<double>(s.probes) / static_cast<double>(s.block_lookups) : 0.0;
    };
    const auto s1 = one->stats(), s100 = many->stats();
    const double p1 = files_per_lookup(s1), p100 = files_per_lookup(s100);
    o.note(fmt::format("chained-file chain lengths: {} and {}", s1.chain_length, s100.chain_length));
    o.check(p100 >= kProbeRatio * p1, fmt::format("chained-file files consulted per block: depth 1 = {:.2f}, depth {} = {:.2f} (need >= {}x)",
                                                  p1, s100.chain_length, p100, kProbeRatio));
    o.check(c100 < c1, fmt::format("chained-file random-read IOPS depth 1 = {:.0f}, depth {} = {:.0f} ({:.1f}x slower)", c1,
                                   s100.chain_length, c100, c1 / std::max(c100, 1.0)));
    return o;
}

// 9 ------------------------------------------------------------------------
Outcome nbd_conformance() {
    Outcome o;
    constexpr std::uint64_t kSize = 16 * kMiB;
    auto make_cluster = [&](std::vector<std::shared_ptr<MemoryStore>>& mem, std::vector<std::unique_ptr<LocalReplica>>& reps) {
        controller::ControllerConfig cfg;
        for (int i = 0; i < 2; ++i) {
            mem.push_back(std::make_shared<MemoryStore>(kSize, kBlock));
            reps.push_back(std::make_unique<LocalReplica>(mem.back()));
            cfg.replicas.push_back(reps.back()->endpoint());
        }
        cfg.volume_size = kSize;
        return controller::Controller::start(cfg);
    };
    std::vector<std::shared_ptr<MemoryStore>> mem_a, mem_b;
    std::vector<std::unique_ptr<LocalReplica>> reps_a, reps_b;
    auto direct = make_cluster(mem_a, reps_a);
    auto exported = make_cluster(mem_b, reps_b);
    nbd::Server server(*exported, {"127.0.0.1", 0});

    try {
        RawPeer p(server.endpoint());
        const auto flags = p.greet();
        o.check((flags & nbd::kFlagFixedNewstyle) != 0, "greeting NBDMAGIC/IHAVEOPT with fixed-newstyle flag");
        p.option(static_cast<std::uint32_t>(nbd::Option::go), RawPeer::go_payload("minihorn", {nbd::kInfoBlockSize}));
        auto r = p.option_reply();
        const bool export_ok = r.type == nbd::kRepInfo && r.data.size() == 12 && load_be<std::uint64_t>(r.data.data() + 2) == kSize;
        const auto tx = r.data.size() == 12 ? load_be<std::uint16_t>(r.data.data() + 10) : 0;
        r = p.option_reply();
        const bool bs_ok = r.type == nbd::kRepInfo && r.data.size() == 14 && load_be<std::uint32_t>(r.data.data() + 2) == kBlock;
        const bool ack = p.option_reply().type == nbd::kRepAck;
        o.check(export_ok && bs_ok && ack, "NBD_OPT_GO: INFO_EXPORT size, INFO_BLOCK_SIZE, ACK");
        o.check((tx & (nbd::kTxHasFlags | nbd::kTxSendFlush | nbd::kTxSendTrim)) == (nbd::kTxHasFlags | nbd::kTxSendFlush | nbd::kTxSendTrim),
                fmt::format("transmission flags {:#06x} advertise FLUSH and TRIM", tx));

        p.request(nbd::Command::read, 1, 0, kBlock);
        auto [e1, h1] = p.simple_reply();
        const auto zeros = p.recv(kBlock);
        o.check(e1 == 0 && h1 == 1 && std::all_of(zeros.begin(), zeros.end(), [](std::byte b) { return b == std::byte{0}; }),
                "READ of a fresh volume returns zeros");
        const auto data = pattern(2 * kBlock, 99);
        p.request(nbd::Command::write, 2, 8 * kBlock, 2 * kBlock);
        p.send(data);
        auto [e2, h2] = p.simple_reply();
        p.request(nbd::Command::flush, 3, 0, 0);
        auto [e3, h3] = p.simple_reply();
        p.request(nbd::Command::read, 4, 8 * kBlock, 2 * kBlock);
        auto [e4, h4] = p.simple_reply();
        const auto back = p.recv(2 * kBlock);
        o.check(e2 == 0 && h2 == 2 && e3 == 0 && h3 == 3 && e4 == 0 && h4 == 4 && back == data, "WRITE, FLUSH, READ round trip");
        p.request(nbd::Command::trim, 5, 8 * kBlock, kBlock);
        auto [e5, h5] = p.simple_reply();
        p.request(nbd::Command::read, 6, 8 * kBlock, 2 * kBlock);
        auto [e6, h6] = p.simple_reply();
        const auto trimmed = p.recv(2 * kBlock);
        const bool trim_ok = e5 == 0 && h5 == 5 && e6 == 0 &&
                             std::all_of(trimmed.begin(), trimmed.begin() + kBlock, [](std::byte b) { return b == std::byte{0}; }) &&
                             std::equal(trimmed.begin() + kBlock, trimmed.end(), data.begin() + kBlock);
        o.check(trim_ok, "TRIM zeroes exactly the trimmed range");
        p.request(nbd::Command::read, 7, kSize, kBlock);
        auto [e7, h7] = p.simple_reply();
        p.request(nbd::Command::read, 8, 0, kBlock);
        auto [e8, h8] = p.simple_reply();
        p.recv(kBlock);
        o.check(e7 == nbd::kEINVAL && h7 == 7 && e8 == 0 && h8 == 8, fmt::format("out-of-range READ -> error {}, connection survives", e7));
        p.request(nbd::Command::disc, 9, 0, 0);
        o.check(p.closed_by_peer(), "DISC closes the connection");
    } catch (const std::exception& e) {
        o.check(false, fmt::format("raw protocol exchange threw: {}", e.what()));
    }

    auto client = nbd::Client::connect(server.endpoint());
    std::mt19937_64 rng(909);
    const std::uint64_t blocks = kSize / kBlock;
    std::uint64_t read_mismatches = 0, ops = 0;
    for (int i = 0; i < 5000; ++i, ++ops) {
        const std::uint64_t len = (1 + rng() % 16) * kBlock;
        const std::uint64_t off = rng() % (blocks - len / kBlock + 1) * kBlock;
        switch (rng() % 5) {
            case 0:
            case 1: {
                const auto d = pattern(len, rng());
                direct->write(off, d);
                client->write(off, d);
                break;
            }
            case 2:
                direct->unmap(off, len);
                client->unmap(off, len);
                break;
            case 3:
                client->flush();
                break;
            default: {
                std::vector<std::byte> a(len), b(len);
                direct->read(off, a);
                client->read(off, b);
                read_mismatches += a != b;
            }
        }
    }
    client->disconnect();
    direct.reset();
    exported.reset();
    o.check(read_mismatches == 0 && mem_a[0]->image() == mem_b[0]->image() && mem_a[1]->image() == mem_b[1]->image(),
            fmt::format("pass-through: {} identical ops via NBD and direct calls, {} read mismatches, replica images equal", ops,
                        read_mismatches));
    return o;
}

// 10 -----------------------------------------------------------------------
Outcome codec_fuzz() {
    Outcome o;
    std::mt19937_64 rng(1010);
    auto random_message = [&] {
        using dataconn::MsgType;
        const auto type = static_cast<MsgType>(1 + rng() % 6);
        const auto id = static_cast<std::uint32_t>(rng());
        const std::uint64_t offset = rng();
        // Mostly small payloads, now and then a large one.
        const std::uint32_t len = rng() % 1000 == 0 ? static_cast<std::uint32_t>(rng() % (1u << 20)) : static_cast<std::uint32_t>(rng() % 64);
        std::vector<std::byte> payload(len);
        for (auto& b : payload) b = static_cast<std::byte>(rng());
        switch (type) {
            case MsgType::read: return dataconn::make_read(id, offset, static_cast<std::uint32_t>(rng()));
            case MsgType::write: return dataconn::make_write(id, offset, payload);
            case MsgType::unmap: return dataconn::make_unmap(id, offset, static_cast<std::uint32_t>(rng()));
            case MsgType::ping: return dataconn::make_ping(id);
            case MsgType::response: return dataconn::make_response(id, offset, std::move(payload));
            default: return dataconn::make_error(id, std::string_view(reinterpret_cast<const char*>(payload.data()), payload.size()));
        }
    };

    std::uint64_t identical = 0;
    std::vector<std::byte> stream;
    std::vector<dataconn::Message> batch;
    for (std::uint64_t i = 0; i < kFuzzFrames; ++i) {
        auto m = random_message();
        const auto bytes = dataconn::encode(m);
        const auto d = dataconn::decode(bytes);
        identical += d.message && *d.message == m && d.consumed == bytes.size();
        // Every 64 frames, also decode them back to back from one buffer.
        stream.insert(stream.end(), bytes.begin(), bytes.end());
        batch.push_back(std::move(m));
        if (batch.size() == 64) {
            std::size_t pos = 0, k = 0;
            while (pos < stream.size()) {
                auto r = dataconn::decode(std::span(stream).subspan(pos));
                if (!r.message || !(*r.message == batch[k])) break;
                pos += r.consumed;
                ++k;
            }
            if (k != batch.size()) identical = 0;
            stream.clear();
            batch.clear();
        }
    }
    o.check(identical == kFuzzFrames, fmt::format("{}/{} random valid frames round-trip encode -> decode", identical, kFuzzFrames));

    std::uint64_t protocol_errors = 0, frames = 0, need_more = 0, other = 0;
    std::vector<std::byte> buf;
    for (std::uint64_t i = 0; i < kFuzzStreams; ++i) {
        if (i % 2 == 0) {
            buf.resize(rng() % 512);
            for (auto& b : buf) b = static_cast<std::byte>(rng());
        } else {
            // A valid frame with a few bytes flipped.
            buf = dataconn::encode(random_message());
            for (int f = 0; f < 1 + static_cast<int>(rng() % 4); ++f) buf[rng() % buf.size()] ^= static_cast<std::byte>(1 + rng() % 255);
        }
        std::size_t pos = 0;
        try {
            while (pos < buf.size()) {
                auto r = dataconn::decode(std::span<const std::byte>(buf).subspan(pos));
                if (!r.message) {
                    ++need_more;
                    break;
                }
                if (r.consumed == 0 || r.consumed > buf.size() - pos) {
                    ++other;
                    break;
                }
                ++frames;
                pos += r.consumed;
            }
        } catch (const Error& e) {
            if (e.code() == Errc::protocol) {
                ++protocol_errors;
            } else {
                ++other;
            }
        } catch (...) {
            ++other;
        }
    }
    o.check(other == 0, fmt::format("{} random/mutated byte streams: {} protocol errors, {} frames, {} incomplete, {} other outcomes",
                                    kFuzzStreams, protocol_errors, frames, need_more, other));
    return o;
}

struct Criterion {
    int number;
    const char* title;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    spdlog::set_level(spdlog::level::err);
    const std::vector<Criterion> all = {
        {1, "dbs oracle equivalence", dbs_oracle_equivalence},
        {2, "reopen reconstruction", reopen_reconstruction},
        {3, "token-pool accounting", token_accounting},
        {4, "strategy equivalence", strategy_equivalence},
        {5, "mirroring and read-your-writes", mirroring_and_failover},
        {6, "layer monotonicity", layer_monotonicity},
        {7, "dispatcher ordering", dispatcher_ordering},
        {8, "snapshot-depth resilience", snapshot_depth},
        {9, "nbd conformance", nbd_conformance},
        {10, "wire-codec fuzz", codec_fuzz},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

    int failed = 0;
    for (const auto& c : all) {
        if (!selected.empty() && !selected.count(c.number)) continue;
        const auto t0 = Clock::now();
        Outcome out;
        try {
            out = c.run();
        } catch (const std::exception& e) {
            out.check(false, fmt::format("threw: {}", e.what()));
        }
        failed += !out.pass;
        fmt::print("{} {:>2} {} ({:.1f} s)\n", out.pass ? "PASS" : "FAIL", c.number, c.title, seconds_since(t0));
        for (const auto& n : out.notes) fmt::print("        {}\n", n);
        std::fflush(stdout);
    }
    fmt::print("{} criteria failed\n", failed);
    return failed == 0 ? 0 : 1;
}
