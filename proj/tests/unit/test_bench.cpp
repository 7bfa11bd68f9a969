#include <gtest/gtest.h>

#include <algorithm>

#include "minihorn/bench/matrix.hpp"
#include "minihorn/error.hpp"
#include "temp_dir.hpp"

using namespace minihorn;
using namespace minihorn::bench;
using controller::Strategy;

namespace {

std::size_t count(const std::string& s, const std::string& needle) {
    std::size_t n = 0;
    for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + 1)) ++n;
    return n;
}

}  // namespace

TEST(BenchNames, ParseRoundTrip) {
    for (Layer l : kAllLayers) EXPECT_EQ(parse_layer(to_string(l)), l);
    for (Workload w : kAllWorkloads) EXPECT_EQ(parse_workload(to_string(w)), w);
    for (Backend b : {Backend::chained_file, Backend::dbs, Backend::null}) EXPECT_EQ(parse_backend(to_string(b)), b);
    EXPECT_EQ(parse_frontend("nbd"), FrontendKind::nbd);
    EXPECT_THROW(parse_layer("frontend"), Error);
    EXPECT_EQ(all_variants().size(), 6u);
    EXPECT_EQ((Variant{Strategy::token, Backend::dbs}.name()), "token/dbs");
}

TEST(BenchSpec, WorkloadShapes) {
    MatrixConfig cfg;
    cfg.iops_queue_depth = 64;
    cfg.bw_queue_depth = 2;
    auto s = workload_spec(cfg, Workload::iops_4k_rand_read);
    EXPECT_EQ(s.pattern, frontend::Pattern::rand_read);
    EXPECT_EQ(s.io_size, 4096u);
    EXPECT_EQ(s.queue_depth, 64u);
    s = workload_spec(cfg, Workload::bw_1m_seq_write);
    EXPECT_EQ(s.pattern, frontend::Pattern::seq_write);
    EXPECT_EQ(s.io_size, 1u << 20);
    EXPECT_EQ(s.queue_depth, 2u);
    EXPECT_EQ(default_connections(Strategy::legacy), 2u);
    EXPECT_EQ(default_connections(Strategy::token), 6u);
}

TEST(BenchMatrix, NullBackendRowIsOneMeasurement) {
    MatrixConfig cfg;
    cfg.rows = {Layer::null_backend};
    cfg.workloads = {Workload::iops_4k_rand_read};
    cfg.ops = 2000;
    std::size_t callbacks = 0;
    const auto r = run_matrix(cfg, [&](const Cell&) { ++callbacks; });
    ASSERT_EQ(r.cells.size(), 6u);
    EXPECT_EQ(callbacks, 6u);
    EXPECT_EQ(std::count_if(r.cells.begin(), r.cells.end(), [](const Cell& c) { return !c.reused; }), 1);
    for (const auto& c : r.cells) {
        EXPECT_TRUE(c.ok) << c.error;
        EXPECT_EQ(c.report.ops, 2000u);
    }
}

TEST(BenchMatrix, SmallFullMatrix) {
    minihorn::testing::TempDir dir;
    MatrixConfig cfg;
    cfg.workloads = {Workload::iops_4k_rand_write, Workload::bw_1m_seq_read};
    cfg.variants = {{Strategy::legacy, Backend::chained_file}, {Strategy::token, Backend::dbs}, {Strategy::token, Backend::null}};
    cfg.volume_size = 32ull << 20;
    cfg.duration_s = 0.3;
    cfg.work_dir = dir.path();
    const auto r = run_matrix(cfg);
    ASSERT_EQ(r.cells.size(), 3u * 2u * 3u);
    for (const auto& c : r.cells) {
        EXPECT_TRUE(c.ok) << to_string(c.layer) << " " << c.variant.name() << ": " << c.error;
        EXPECT_GT(c.report.ops, 0u);
        EXPECT_GT(c.headline(), 0.0);
    }
    // token/null on full_engine is the null_storage measurement.
    const Cell* fe = r.find(Layer::full_engine, Workload::bw_1m_seq_read, {Strategy::token, Backend::null});
    const Cell* ns = r.find(Layer::null_storage, Workload::bw_1m_seq_read, {Strategy::token, Backend::null});
    ASSERT_TRUE(fe && ns);
    EXPECT_TRUE(fe->reused);
    EXPECT_EQ(fe->report.ops, ns->report.ops);

    const auto table = r.table();
    EXPECT_NE(table.find("iops_4k_rand_write (IOPS)"), std::string::npos);
    EXPECT_NE(table.find("bw_1m_seq_read (MB/s)"), std::string::npos);
    EXPECT_EQ(count(table, "full_engine"), 2u);
    EXPECT_NE(table.find("legacy/chained_file"), std::string::npos);
    const auto kv = r.key_values();
    EXPECT_EQ(count(kv, ".status=ok\n"), r.cells.size());
    EXPECT_NE(kv.find("cell.bw_1m_seq_read.full_engine.token.dbs.iops="), std::string::npos);
    // Scratch files are cleaned up per cell.
    EXPECT_TRUE(std::filesystem::is_empty(dir.path()));
}

TEST(BenchMatrix, FailedCellIsRecordedAndMatrixContinues) {
    MatrixConfig cfg;
    cfg.rows = {Layer::null_backend};
    cfg.workloads = {Workload::bw_1m_seq_write, Workload::iops_4k_rand_write};
    cfg.variants = {{Strategy::token, Backend::null}};
    cfg.volume_size = 4ull << 20;
    cfg.bw_queue_depth = 8;  // more submitters than 1 MiB slots
    cfg.ops = 100;
    const auto r = run_matrix(cfg);
    ASSERT_EQ(r.cells.size(), 2u);
    EXPECT_FALSE(r.cells[0].ok);
    EXPECT_NE(r.cells[0].error.find("too small"), std::string::npos) << r.cells[0].error;
    EXPECT_TRUE(r.cells[1].ok);
    EXPECT_NE(r.table().find("FAILED"), std::string::npos);
    EXPECT_NE(r.key_values().find("status=failed"), std::string::npos);
}

TEST(BenchMatrix, MonotonicityCheck) {
    MatrixReport r;
    r.config.workloads = {Workload::iops_4k_rand_read};
    r.config.variants = {{Strategy::token, Backend::dbs}};
    auto cell = [&](Layer l, double iops) {
        Cell c;
        c.layer = l;
        c.workload = Workload::iops_4k_rand_read;
        c.variant = r.config.variants[0];
        c.ok = true;
        c.report.iops = iops;
        r.cells.push_back(c);
    };
    cell(Layer::null_backend, 100);
    cell(Layer::null_storage, 104);  // within 5%
    cell(Layer::full_engine, 90);
    EXPECT_TRUE(r.monotonicity_violations(0.05).empty());
    r.cells[2].report.iops = 120;
    const auto v = r.monotonicity_violations(0.05);
    ASSERT_EQ(v.size(), 1u);
    EXPECT_NE(v[0].find("null_storage"), std::string::npos);
}
