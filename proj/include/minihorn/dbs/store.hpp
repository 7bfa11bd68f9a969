#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "minihorn/dbs/layout.hpp"
#include "minihorn/util/direct_file.hpp"

namespace minihorn::dbs {

struct InitOptions {
    bool force = false;
    bool direct_io = true;
};

struct OpenOptions {
    bool direct_io = true;
};

struct SnapshotInfo {
    SnapshotId id = kNoSnapshot;
    SnapshotId parent_id = kNoSnapshot;
    std::uint32_t volume_slot = 0;
    std::uint64_t created_at = 0;
    std::uint64_t owned_extents = 0;
    std::uint64_t written_blocks = 0;
};

struct VolumeInfo {
    std::uint32_t slot = 0;
    std::string name;
    std::uint64_t size = 0;
    SnapshotId latest_snapshot_id = kNoSnapshot;
    /// Root first, latest last. Clones include the source volume's history.
    std::vector<SnapshotInfo> chain;
    std::uint64_t owned_extents = 0;
};

struct DeviceReport {
    DeviceGeometry geometry;
    RegionLayout layout;
    std::uint64_t allocation_mark = 0;
    SnapshotId next_snapshot_id = kNoSnapshot;
    std::uint64_t total_extents = 0;
    std::uint64_t free_extents = 0;
    std::uint64_t free_bytes = 0;
    std::vector<VolumeInfo> volumes;
};

/// In-memory extent index in comparable form: per snapshot, logical -> physical extent.
struct ExtentIndexDump {
    std::map<SnapshotId, std::map<std::uint64_t, std::uint32_t>> snapshot_maps;
    std::vector<std::uint32_t> free_extents;  // ascending
    std::uint64_t allocation_mark = 0;

    bool operator==(const ExtentIndexDump&) const = default;
};

struct StoreStats {
    std::uint64_t data_reads = 0;
    std::uint64_t data_writes = 0;
    std::uint64_t metadata_writes = 0;
    bool direct_io = false;
};

/// Direct block store: volumes and snapshot chains over one file or raw device.
///
/// Per-snapshot extent maps and a per-volume resolved block view live only in
/// memory and are rebuilt from the descriptor region on open. Block I/O runs
/// concurrently; extent allocation is serialized on the allocator lock, and
/// administrative operations exclude all I/O.
class Store {
public:
    /// Formats `path`. `geometry.device_size == 0` uses the whole target.
    static Superblock init(const std::filesystem::path& path, DeviceGeometry geometry, InitOptions options = {});
    static std::unique_ptr<Store> open(const std::filesystem::path& path, OpenOptions options = {});

    /// Reads the descriptor region of a closed (or quiescent) device directly,
    /// without going through a Store instance.
    static ExtentIndexDump scan_index(const std::filesystem::path& path);

    Store(const Store&) = delete;
    Store& operator=(const Store&) = delete;
    ~Store();

    VolumeInfo create_volume(std::string_view name, std::uint64_t size);
    void delete_volume(std::string_view name);
    void rename_volume(std::string_view old_name, std::string_view new_name);

    SnapshotInfo create_snapshot(std::string_view volume);
    /// Merges the snapshot's blocks that its child does not shadow into the child,
    /// then frees it. The latest snapshot cannot be deleted.
    void delete_snapshot(std::string_view volume, SnapshotId id);
    /// New volume whose root snapshot's parent is `id`; no data is copied.
    VolumeInfo clone_snapshot(std::string_view source_volume, SnapshotId id, std::string_view new_name);

    void read(std::string_view volume, std::uint64_t offset, std::span<std::byte> out) const;
    void write(std::string_view volume, std::uint64_t offset, std::span<const std::byte> data);
    void unmap(std::string_view volume, std::uint64_t offset, std::uint64_t length);

    DeviceReport query() const;
    VolumeInfo query(std::string_view volume) const;
    std::uint64_t volume_size(std::string_view volume) const;

    const DeviceGeometry& geometry() const noexcept { return sb_.geometry; }
    const RegionLayout& layout() const noexcept { return layout_; }
    Superblock superblock() const;
    ExtentIndexDump dump_index() const;
    StoreStats stats() const noexcept;

private:
    struct Snapshot {
        SnapshotId id = kNoSnapshot;
        SnapshotId parent = kNoSnapshot;
        std::uint32_t volume_slot = 0;
        std::uint32_t table_slot = 0;
        std::uint64_t created_at = 0;
        std::vector<std::uint32_t> extents;  // logical -> physical
    };

    // Physical extent index per block of one logical extent.
    using ResolvedExtent = std::unique_ptr<std::uint32_t[]>;

    struct Volume {
        std::uint32_t slot = 0;
        std::string name;
        std::uint64_t size = 0;
        SnapshotId latest = kNoSnapshot;
        std::vector<ResolvedExtent> view;
    };

    static constexpr std::size_t kExtentLockStripes = 1024;
    static constexpr std::size_t kDescriptorLockStripes = 256;

    Store(DirectFile file, Superblock sb, RegionLayout layout);
    void load();

    // Lookups; callers hold meta_mu_.
    Volume& volume_by_name(std::string_view name);
    const Volume& volume_by_name(std::string_view name) const;
    Snapshot& snapshot(SnapshotId id);
    const Snapshot& snapshot(SnapshotId id) const;
    std::vector<SnapshotId> chain_of(const Volume& vol) const;  // latest first
    std::vector<SnapshotId> children_of(SnapshotId id) const;
    std::uint64_t logical_extents(std::uint64_t volume_size) const noexcept;
    void check_name(std::string_view name) const;
    std::uint32_t free_volume_slot() const;
    std::uint32_t free_snapshot_slots(std::uint32_t needed, std::vector<std::uint32_t>& out) const;

    SnapshotInfo snapshot_info(const Snapshot& s) const;
    VolumeInfo volume_info(const Volume& vol) const;
    Snapshot& add_snapshot(SnapshotId parent, std::uint32_t volume_slot, std::uint32_t table_slot,
                           std::uint64_t extents);
    SnapshotInfo snapshot_volume_locked(Volume& vol);

    // Block I/O helpers; callers hold meta_mu_ shared and the extent stripe.
    void write_extent(Volume& vol, Snapshot& latest, std::uint64_t lext, std::uint32_t first_block,
                      std::span<const std::byte> data);
    void unmap_extent(Volume& vol, Snapshot& latest, std::uint64_t lext, std::uint32_t first_block,
                      std::uint32_t nblocks);
    void read_extent(const Volume& vol, std::uint64_t lext, std::uint32_t first_block, std::span<std::byte> out) const;
    std::uint32_t resolve_block(SnapshotId from, std::uint64_t lext, std::uint32_t block) const;
    void rebuild_view(Volume& vol);
    void rebuild_views_containing(SnapshotId id);

    std::uint32_t allocate_extent();
    void release_extent(std::uint32_t phys);

    std::uint64_t data_position(std::uint32_t phys, std::uint32_t block) const noexcept;
    void read_data(std::uint64_t pos, std::span<std::byte> out) const;
    void write_data(std::uint64_t pos, std::span<const std::byte> data);

    // Metadata persistence.
    void persist_superblock();  // caller holds alloc_mu_
    void persist_volume_slot(std::uint32_t slot);
    void persist_snapshot_slot(std::uint32_t slot);
    void persist_descriptor(std::uint32_t phys);  // caller holds the descriptor stripe
    void persist_descriptor_block_unlocked(std::uint64_t block);
    std::mutex& descriptor_lock(std::uint32_t phys) const noexcept;
    std::shared_mutex& extent_lock(std::uint32_t volume_slot, std::uint64_t lext) const noexcept;

    DirectFile file_;
    Superblock sb_;
    RegionLayout layout_;

    mutable std::shared_mutex meta_mu_;
    mutable std::mutex alloc_mu_;
    mutable std::array<std::shared_mutex, kExtentLockStripes> extent_locks_;
    mutable std::array<std::mutex, kDescriptorLockStripes> descriptor_locks_;

    std::vector<VolumeSlot> volume_slots_;
    std::vector<SnapshotSlot> snapshot_slots_;
    std::vector<ExtentDescriptor> descriptors_;
    std::vector<std::uint32_t> recycled_;  // free extents below the mark, lowest at back

    std::vector<std::unique_ptr<Volume>> volumes_;  // by slot
    std::unordered_map<std::string, std::uint32_t> volume_names_;
    std::unordered_map<SnapshotId, Snapshot> snapshots_;

    mutable std::atomic<std::uint64_t> data_reads_{0};
    std::atomic<std::uint64_t> data_writes_{0};
    std::atomic<std::uint64_t> metadata_writes_{0};
};

}  // namespace minihorn::dbs
