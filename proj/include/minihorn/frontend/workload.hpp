#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "minihorn/block_target.hpp"

namespace minihorn::frontend {

enum class Pattern { rand_read, rand_write, seq_read, seq_write, mixed };

const char* to_string(Pattern p) noexcept;
/// rand_read | rand_write | seq_read | seq_write | mixed
Pattern parse_pattern(const std::string& text);

struct WorkloadSpec {
    Pattern pattern = Pattern::rand_read;
    std::uint32_t io_size = 4096;
    std::uint32_t queue_depth = 1;
    std::uint32_t num_queues = 1;
    /// Stop after this many ops in total (split evenly over submitters), or
    /// after duration_s seconds when ops is 0.
    std::uint64_t ops = 0;
    double duration_s = 5.0;
    std::uint64_t seed = 1;
    bool verify = false;
    std::uint32_t read_pct = 50;  // mixed only
    /// Byte range the workload touches; size 0 means up to the end of the target.
    std::uint64_t region_offset = 0;
    std::uint64_t region_size = 0;

    std::uint32_t submitters() const noexcept { return queue_depth * num_queues; }
};

struct BenchReport {
    WorkloadSpec spec;
    std::uint64_t ops = 0;
    std::uint64_t bytes = 0;
    std::uint64_t errors = 0;
    std::uint64_t verify_failures = 0;
    std::uint64_t verified_blocks = 0;
    double seconds = 0;
    double iops = 0;
    double bandwidth = 0;  // bytes per second
    double p50_us = 0;
    double p95_us = 0;
    double p99_us = 0;
    std::string first_error;

    bool ok() const noexcept { return errors == 0 && verify_failures == 0; }
};

struct Op {
    bool is_read = true;
    std::uint64_t offset = 0;

    bool operator==(const Op&) const = default;
};

/// Deterministic op stream of one submitter. Submitter `index` of `count` owns
/// the io-size slots congruent to index modulo count, so concurrent submitters
/// never touch the same bytes.
class OpGenerator {
public:
    OpGenerator(const WorkloadSpec& spec, std::uint64_t target_size, std::uint32_t index, std::uint32_t count);

    Op next();
    /// Slots this submitter may touch; 0 when the region is smaller than the submitter count.
    std::uint64_t owned_slots() const noexcept { return owned_; }

private:
    Pattern pattern_;
    std::uint32_t read_pct_;
    std::uint64_t base_;
    std::uint32_t io_size_;
    std::uint32_t index_;
    std::uint32_t count_;
    std::uint64_t owned_;
    std::uint64_t seq_ = 0;
    std::mt19937_64 rng_;
};

/// Runs the workload with spec.submitters() threads, each issuing synchronous
/// I/O back to back. Aborts on the first error or verification mismatch.
BenchReport run_workload(BlockTarget& target, const WorkloadSpec& spec);

/// Tag layout written in verify mode at the start of every block.
struct BlockTag {
    std::uint64_t block = 0;
    std::uint64_t generation = 0;
    std::uint64_t seed_digest = 0;
};
void fill_tagged_block(std::span<std::byte> block, const BlockTag& tag);
/// Parses and checks a tagged block; returns false for anything that is not a
/// well-formed, self-consistent block.
bool parse_tagged_block(std::span<const std::byte> block, BlockTag& tag);
std::uint64_t seed_digest(std::uint64_t seed) noexcept;

std::string format_report(const BenchReport& r);
/// One key=value per line, prefixed with `prefix`.
std::string report_key_values(const BenchReport& r, const std::string& prefix = "");

}  // namespace minihorn::frontend
