#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <vector>

#include "minihorn/replica/backing_store.hpp"
#include "minihorn/util/direct_file.hpp"

namespace minihorn::replica {

struct ChainedFileOptions {
    bool versioning = true;
    bool direct_io = true;
};

struct ChainedFileStats {
    std::uint64_t probes = 0;           // bitmap lookups in files below the head
    std::uint64_t block_lookups = 0;    // blocks resolved by reads
    std::uint64_t metadata_writes = 0;  // volume.meta rewrites
    std::uint64_t revision = 0;
    std::size_t chain_length = 0;
};

/// Baseline backend: one data file per snapshot (`snap-<id>.dat`), newest on
/// top. Each file starts with a header holding a block-presence bitmap; a read
/// probes files from newest to oldest and takes the first hit. `volume.meta`
/// names the head file and carries a revision counter bumped on every write.
///
/// The head bitmap is cached in memory. Older files are probed on disk, one
/// positioned read per file, which is what makes deep chains slow.
class ChainedFileStore final : public BackingStore {
public:
    static std::unique_ptr<ChainedFileStore> create(const std::filesystem::path& dir, std::uint64_t size,
                                                    std::uint32_t block_size, ChainedFileOptions options = {});
    static std::unique_ptr<ChainedFileStore> open(const std::filesystem::path& dir, ChainedFileOptions options = {});

    ~ChainedFileStore() override;

    std::uint64_t size() const override { return size_; }
    std::uint32_t block_size() const override { return block_size_; }
    void read(std::uint64_t offset, std::span<std::byte> out) override;
    void write(std::uint64_t offset, std::span<const std::byte> data) override;
    void unmap(std::uint64_t offset, std::uint64_t length) override;
    std::string describe() const override { return "chained_file"; }

    /// Freezes the head and starts a new empty one.
    void snapshot();

    ChainedFileStats stats() const;
    void reset_counters();

private:
    struct Layer {
        std::uint32_t id = 0;
        std::filesystem::path path;
        DirectFile data;
        int meta_fd = -1;  // buffered descriptor for header access
    };

    ChainedFileStore(std::filesystem::path dir, std::uint64_t size, std::uint32_t block_size,
                     ChainedFileOptions options);

    std::uint64_t blocks() const noexcept { return size_ / block_size_; }
    std::uint64_t header_size() const noexcept;
    std::unique_ptr<Layer> make_layer(std::uint32_t id, bool create);
    void load_head_bitmap();
    void persist_head_bitmap(std::uint64_t first_block, std::uint64_t nblocks);
    void bump_revision();
    void write_meta();
    bool head_has(std::uint64_t block) const noexcept;
    // Index into layers_ holding the block, or -1.
    int locate(std::uint64_t block);

    std::filesystem::path dir_;
    std::uint64_t size_;
    std::uint32_t block_size_;
    ChainedFileOptions options_;

    mutable std::shared_mutex chain_mu_;  // exclusive for snapshot()
    std::vector<std::unique_ptr<Layer>> layers_;  // oldest first
    std::unique_ptr<std::atomic<std::uint64_t>[]> head_bits_;
    std::size_t head_words_ = 0;
    std::mutex bitmap_mu_;
    mutable std::mutex meta_mu_;
    std::uint64_t revision_ = 0;
    int meta_file_fd_ = -1;

    std::atomic<std::uint64_t> probes_{0};
    std::atomic<std::uint64_t> lookups_{0};
    std::atomic<std::uint64_t> meta_writes_{0};
};

}  // namespace minihorn::replica
