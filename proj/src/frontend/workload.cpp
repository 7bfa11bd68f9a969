#include "minihorn/frontend/workload.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstring>
#include <latch>
#include <mutex>
#include <thread>
#include <unordered_map>

#include <fmt/format.h>

#include "minihorn/error.hpp"
#include "minihorn/util/bytes.hpp"

namespace minihorn::frontend {

namespace {

constexpr std::uint64_t kTagMagic = 0x594649524556484dull;  // "MHVERIFY"
constexpr std::size_t kTagSize = 32;

std::uint64_t mix(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

std::uint64_t body_seed(const BlockTag& t) noexcept { return mix(t.block ^ mix(t.generation ^ mix(t.seed_digest))); }

}  // namespace

const char* to_string(Pattern p) noexcept {
    switch (p) {
        case Pattern::rand_read: return "rand_read";
        case Pattern::rand_write: return "rand_write";
        case Pattern::seq_read: return "seq_read";
        case Pattern::seq_write: return "seq_write";
        case Pattern::mixed: return "mixed";
    }
    return "?";
}

Pattern parse_pattern(const std::string& text) {
    for (Pattern p : {Pattern::rand_read, Pattern::rand_write, Pattern::seq_read, Pattern::seq_write, Pattern::mixed}) {
        if (text == to_string(p)) return p;
    }
    throw Error(Errc::invalid_argument, fmt::format("unknown pattern '{}'", text));
}

std::uint64_t seed_digest(std::uint64_t seed) noexcept { return mix(seed ^ 0x5eedull); }

void fill_tagged_block(std::span<std::byte> block, const BlockTag& tag) {
    bytes::store_le<std::uint64_t>(block.data(), kTagMagic);
    bytes::store_le<std::uint64_t>(block.data() + 8, tag.block);
    bytes::store_le<std::uint64_t>(block.data() + 16, tag.generation);
    bytes::store_le<std::uint64_t>(block.data() + 24, tag.seed_digest);
    std::uint64_t s = body_seed(tag);
    for (std::size_t i = kTagSize; i + 8 <= block.size(); i += 8) {
        s = s * 6364136223846793005ull + 1442695040888963407ull;
        std::memcpy(block.data() + i, &s, 8);
    }
}

bool parse_tagged_block(std::span<const std::byte> block, BlockTag& tag) {
    if (block.size() < kTagSize || bytes::load_le<std::uint64_t>(block.data()) != kTagMagic) return false;
    tag.block = bytes::load_le<std::uint64_t>(block.data() + 8);
    tag.generation = bytes::load_le<std::uint64_t>(block.data() + 16);
    tag.seed_digest = bytes::load_le<std::uint64_t>(block.data() + 24);
    std::uint64_t s = body_seed(tag);
    for (std::size_t i = kTagSize; i + 8 <= block.size(); i += 8) {
        s = s * 6364136223846793005ull + 1442695040888963407ull;
        if (std::memcmp(block.data() + i, &s, 8) != 0) return false;
    }
    return true;
}

OpGenerator::OpGenerator(const WorkloadSpec& spec, std::uint64_t target_size, std::uint32_t index,
                         std::uint32_t count)
    : pattern_(spec.pattern),
      read_pct_(spec.read_pct),
      base_(spec.region_offset),
      io_size_(spec.io_size),
      index_(index),
      count_(count),
      rng_(mix(spec.seed) ^ mix(0x1000 + index)) {
    const std::uint64_t region = spec.region_size ? spec.region_size : target_size - spec.region_offset;
    const std::uint64_t slots = region / io_size_;
    owned_ = slots / count_ + (index_ < slots % count_ ? 1 : 0);
}

Op OpGenerator::next() {
    Op op;
    std::uint64_t local;
    switch (pattern_) {
        case Pattern::seq_read:
        case Pattern::seq_write:
            local = seq_++ % owned_;
            break;
        default:
            local = rng_() % owned_;
            break;
    }
    op.offset = base_ + (local * count_ + index_) * io_size_;
    switch (pattern_) {
        case Pattern::rand_read:
        case Pattern::seq_read: op.is_read = true; break;
        case Pattern::rand_write:
        case Pattern::seq_write: op.is_read = false; break;
        case Pattern::mixed: op.is_read = rng_() % 100 < read_pct_; break;
    }
    return op;
}

BenchReport run_workload(BlockTarget& target, const WorkloadSpec& spec) {
    const std::uint32_t bs = target.block_size();
    if (spec.io_size == 0 || spec.io_size % bs != 0) {
        throw Error(Errc::invalid_argument, fmt::format("io size {} must be a multiple of the block size {}", spec.io_size, bs));
    }
    if (spec.region_offset % spec.io_size != 0 || spec.region_offset >= target.size() ||
        spec.region_offset + spec.region_size > target.size()) {
        throw Error(Errc::invalid_argument, "workload region outside the target");
    }
    const std::uint32_t workers = std::max<std::uint32_t>(1, spec.submitters());
    if (OpGenerator(spec, target.size(), workers - 1, workers).owned_slots() == 0) {
        throw Error(Errc::invalid_argument, "region too small for the number of submitters");
    }

    BenchReport report;
    report.spec = spec;
    std::atomic<bool> stop{false};
    std::mutex err_mu;
    std::vector<std::vector<float>> latencies(workers);
    std::vector<std::uint64_t> done(workers, 0), errors(workers, 0), bad(workers, 0), checked(workers, 0);
    auto record_error = [&](std::string what) {
        std::lock_guard lk(err_mu);
        if (report.first_error.empty()) report.first_error = std::move(what);
        stop = true;
    };
    const std::uint64_t digest = seed_digest(spec.seed);

    std::latch ready(workers + 1);
    std::vector<std::thread> threads;
    for (std::uint32_t w = 0; w < workers; ++w) {
        const std::uint64_t quota = spec.ops ? spec.ops / workers + (w < spec.ops % workers ? 1 : 0) : UINT64_MAX;
        threads.emplace_back([&, w, quota] {
            OpGenerator gen(spec, target.size(), w, workers);
            std::vector<std::byte> buf(spec.io_size);
            std::unordered_map<std::uint64_t, std::uint64_t> generations;
            auto& lat = latencies[w];
            if (spec.ops) lat.reserve(quota);
            ready.arrive_and_wait();
            for (std::uint64_t i = 0; i < quota && !stop.load(std::memory_order_relaxed); ++i) {
                const Op op = gen.next();
                std::uint64_t generation = 0;
                if (!op.is_read && spec.verify) {
                    generation = ++generations[op.offset];
                    for (std::uint32_t b = 0; b < spec.io_size; b += bs) {
                        fill_tagged_block(std::span(buf).subspan(b, bs), {(op.offset + b) / bs, generation, digest});
                    }
                }
                const auto t0 = std::chrono::steady_clock::now();
                try {
                    if (op.is_read) {
                        target.read(op.offset, buf);
                    } else {
                        target.write(op.offset, buf);
                    }
                } catch (const std::exception& e) {
                    ++errors[w];
                    record_error(fmt::format("{} at offset {}: {}", op.is_read ? "read" : "write", op.offset, e.what()));
                    break;
                }
                const auto t1 = std::chrono::steady_clock::now();
                lat.push_back(std::chrono::duration<float, std::micro>(t1 - t0).count());
                ++done[w];
                if (op.is_read && spec.verify) {
                    auto it = generations.find(op.offset);
                    for (std::uint32_t b = 0; b < spec.io_size; b += bs) {
                        auto blk = std::span<const std::byte>(buf).subspan(b, bs);
                        const std::uint64_t block = (op.offset + b) / bs;
                        BlockTag tag;
                        const bool parsed = parse_tagged_block(blk, tag);
                        if (!parsed && it == generations.end() &&
                            std::all_of(blk.begin(), blk.end(), [](std::byte x) { return x == std::byte{0}; })) {
                            continue;  // never written by this seed
                        }
                        ++checked[w];
                        const char* why = nullptr;
                        if (!parsed) {
                            why = "content does not match its tag";
                        } else if (tag.block != block) {
                            why = "tag names another block";
                        } else if (tag.seed_digest != digest) {
                            why = "tag from another seed";
                        } else if (it != generations.end() && tag.generation != it->second) {
                            why = "stale generation";
                        }
                        if (why) {
                            ++bad[w];
                            record_error(fmt::format("verify mismatch at offset {} (block {}): {}", op.offset + b, block, why));
                            break;
                        }
                    }
                }
            }
        });
    }
    ready.arrive_and_wait();
    const auto start = std::chrono::steady_clock::now();
    if (!spec.ops) {
        const auto deadline = start + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                          std::chrono::duration<double>(spec.duration_s));
        while (!stop.load() && std::chrono::steady_clock::now() < deadline) {
            std::this_thread::sleep_until(std::min(deadline, std::chrono::steady_clock::now() + std::chrono::milliseconds(10)));
        }
        stop = true;
    }
    for (auto& t : threads) t.join();
    const auto end = std::chrono::steady_clock::now();

    std::vector<float> all;
    for (std::uint32_t w = 0; w < workers; ++w) {
        report.ops += done[w];
        report.errors += errors[w];
        report.verify_failures += bad[w];
        report.verified_blocks += checked[w];
        all.insert(all.end(), latencies[w].begin(), latencies[w].end());
    }
    report.bytes = report.ops * spec.io_size;
    report.seconds = std::chrono::duration<double>(end - start).count();
    if (report.seconds > 0) {
        report.iops = static_cast<double>(report.ops) / report.seconds;
        report.bandwidth = static_cast<double>(report.bytes) / report.seconds;
    }
    if (!all.empty()) {
        auto pct = [&](double p) {
            const auto k = static_cast<std::size_t>(p * static_cast<double>(all.size() - 1));
            std::nth_element(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end());
            return static_cast<double>(all[k]);
        };
        report.p50_us = pct(0.50);
        report.p95_us = pct(0.95);
        report.p99_us = pct(0.99);
    }
    return report;
}

std::string format_report(const BenchReport& r) {
    std::string out = fmt::format("{} io={} qd={} queues={} verify={}\n", to_string(r.spec.pattern), r.spec.io_size,
                                  r.spec.queue_depth, r.spec.num_queues, r.spec.verify ? "on" : "off");
    out += fmt::format("  ops {}  in {:.2f}s  IOPS {:.0f}  bandwidth {:.1f} MB/s\n", r.ops, r.seconds, r.iops,
                       r.bandwidth / 1e6);
    out += fmt::format("  latency us p50 {:.1f}  p95 {:.1f}  p99 {:.1f}\n", r.p50_us, r.p95_us, r.p99_us);
    out += fmt::format("  errors {}  verify failures {}", r.errors, r.verify_failures);
    if (!r.first_error.empty()) out += fmt::format("  first error: {}", r.first_error);
    out += '\n';
    return out;
}

std::string report_key_values(const BenchReport& r, const std::string& prefix) {
    std::string out;
    auto kv = [&](std::string_view k, const auto& v) { out += fmt::format("{}{}={}\n", prefix, k, v); };
    kv("pattern", to_string(r.spec.pattern));
    kv("io_size", r.spec.io_size);
    kv("queue_depth", r.spec.queue_depth);
    kv("num_queues", r.spec.num_queues);
    kv("seed", r.spec.seed);
    kv("verify", r.spec.verify ? 1 : 0);
    kv("ops", r.ops);
    kv("seconds", fmt::format("{:.6f}", r.seconds));
    kv("iops", fmt::format("{:.1f}", r.iops));
    kv("bandwidth_bytes_per_s", fmt::format("{:.1f}", r.bandwidth));
    kv("lat_p50_us", fmt::format("{:.2f}", r.p50_us));
    kv("lat_p95_us", fmt::format("{:.2f}", r.p95_us));
    kv("lat_p99_us", fmt::format("{:.2f}", r.p99_us));
    kv("errors", r.errors);
    kv("verify_failures", r.verify_failures);
    return out;
}

}  // namespace minihorn::frontend
