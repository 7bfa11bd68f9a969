#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

// On-disk format of the direct block store. Every region starts on a block
// boundary and all integers are little-endian:
//
//   [superblock | volume table | snapshot table | extent descriptors | data extents]
//
namespace minihorn::dbs {

using SnapshotId = std::uint32_t;

inline constexpr SnapshotId kNoSnapshot = 0;
inline constexpr std::uint32_t kNoExtent = 0xffffffffu;
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::array<char, 8> kMagic = {'D', 'B', 'S', 'S', 'T', 'O', 'R', 'E'};
inline constexpr std::size_t kSuperblockEncodedSize = 72;
inline constexpr std::size_t kVolumeSlotSize = 64;
inline constexpr std::size_t kSnapshotSlotSize = 32;
inline constexpr std::size_t kMaxVolumeName = 48;
inline constexpr std::size_t kDescriptorHeaderSize = 16;

struct DeviceGeometry {
    std::uint32_t block_size = 4096;
    std::uint32_t blocks_per_extent = 256;
    std::uint64_t device_size = 0;
    std::uint32_t max_volumes = 64;
    std::uint32_t max_snapshots = 1024;

    std::uint64_t extent_size() const noexcept {
        return static_cast<std::uint64_t>(block_size) * blocks_per_extent;
    }

    /// Throws Errc::invalid_argument for non-power-of-two sizes or zero counts.
    void validate() const;

    bool operator==(const DeviceGeometry&) const = default;
};

/// Region offsets and sizes derived from a geometry.
struct RegionLayout {
    std::uint64_t volume_table_offset = 0;
    std::uint64_t volume_table_size = 0;
    std::uint64_t snapshot_table_offset = 0;
    std::uint64_t snapshot_table_size = 0;
    std::uint64_t tracking_offset = 0;
    std::uint64_t tracking_size = 0;
    std::uint64_t data_offset = 0;
    std::uint64_t extent_count = 0;
    std::uint32_t descriptor_size = 0;

    std::uint64_t metadata_offset() const noexcept { return volume_table_offset; }
};

/// Size of one extent descriptor: 16-byte header plus bitmap, rounded up to a power of two.
std::uint32_t descriptor_size(std::uint32_t blocks_per_extent) noexcept;

/// Places the regions for `geometry` and picks the largest extent count whose
/// descriptors and data both fit. Throws Errc::invalid_argument ("device too small")
/// when not even one extent fits.
RegionLayout compute_layout(const DeviceGeometry& geometry);

struct Superblock {
    std::uint32_t format_version = kFormatVersion;
    DeviceGeometry geometry;
    std::uint64_t allocation_mark = 0;
    SnapshotId next_snapshot_id = 1;
    std::uint64_t metadata_offset = 0;
    std::uint64_t tracking_offset = 0;
    std::uint64_t data_offset = 0;

    bool operator==(const Superblock&) const = default;
};

bool has_magic(std::span<const std::byte> block) noexcept;
void encode_superblock(const Superblock& sb, std::span<std::byte> block);
/// Throws Errc::corrupt on a bad magic or unknown format version.
Superblock decode_superblock(std::span<const std::byte> block);

struct VolumeSlot {
    bool live = false;
    SnapshotId latest_snapshot_id = kNoSnapshot;
    std::uint64_t volume_size = 0;
    std::string name;

    bool operator==(const VolumeSlot&) const = default;
};

void encode_volume_slot(const VolumeSlot& slot, std::span<std::byte, kVolumeSlotSize> out);
VolumeSlot decode_volume_slot(std::span<const std::byte, kVolumeSlotSize> in);

struct SnapshotSlot {
    bool live = false;
    SnapshotId id = kNoSnapshot;
    SnapshotId parent_id = kNoSnapshot;
    std::uint32_t volume_slot = 0;
    std::uint64_t created_at = 0;

    bool operator==(const SnapshotSlot&) const = default;
};

void encode_snapshot_slot(const SnapshotSlot& slot, std::span<std::byte, kSnapshotSlotSize> out);
SnapshotSlot decode_snapshot_slot(std::span<const std::byte, kSnapshotSlotSize> in);

/// Fixed-width bit set; bit i is stored in byte i/8, bit position i%8.
class Bitmap {
public:
    Bitmap() = default;
    explicit Bitmap(std::uint32_t bits) : bits_(bits), words_((bits + 63) / 64, 0) {}

    std::uint32_t size() const noexcept { return bits_; }
    bool test(std::uint32_t i) const noexcept { return (words_[i / 64] >> (i % 64)) & 1u; }
    void set(std::uint32_t i) noexcept { words_[i / 64] |= std::uint64_t{1} << (i % 64); }
    void reset(std::uint32_t i) noexcept { words_[i / 64] &= ~(std::uint64_t{1} << (i % 64)); }
    void clear() noexcept { std::fill(words_.begin(), words_.end(), 0); }
    bool none() const noexcept;
    std::uint32_t count() const noexcept;

    void encode(std::span<std::byte> out) const noexcept;
    void decode(std::span<const std::byte> in) noexcept;

    bool operator==(const Bitmap&) const = default;

private:
    std::uint32_t bits_ = 0;
    std::vector<std::uint64_t> words_;
};

struct ExtentDescriptor {
    SnapshotId owner = kNoSnapshot;
    std::uint64_t logical_index = 0;
    Bitmap bitmap;

    bool free() const noexcept { return owner == kNoSnapshot; }
};

void encode_descriptor(const ExtentDescriptor& d, std::span<std::byte> out);
ExtentDescriptor decode_descriptor(std::span<const std::byte> in, std::uint32_t blocks_per_extent);

}  // namespace minihorn::dbs
