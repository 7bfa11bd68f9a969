#include "minihorn/dbs/layout.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

#include <fmt/format.h>

#include "minihorn/error.hpp"
#include "minihorn/util/bytes.hpp"

namespace minihorn::dbs {

using bytes::align_up;
using bytes::is_pow2;
using bytes::load_le;
using bytes::store_le;

void DeviceGeometry::validate() const {
    if (!is_pow2(block_size) || block_size < 512) {
        throw Error(Errc::invalid_argument, fmt::format("block size {} must be a power of two >= 512", block_size));
    }
    if (!is_pow2(blocks_per_extent)) {
        throw Error(Errc::invalid_argument,
                    fmt::format("blocks per extent {} must be a power of two", blocks_per_extent));
    }
    if (max_volumes == 0 || max_snapshots == 0) {
        throw Error(Errc::invalid_argument, "max volumes and max snapshots must be positive");
    }
    if (max_snapshots < max_volumes) {
        throw Error(Errc::invalid_argument, "max snapshots must be at least max volumes");
    }
}

std::uint32_t descriptor_size(std::uint32_t blocks_per_extent) noexcept {
    auto raw = static_cast<std::uint32_t>(kDescriptorHeaderSize + bytes::div_ceil(blocks_per_extent, 8));
    return std::bit_ceil(raw);
}

RegionLayout compute_layout(const DeviceGeometry& g) {
    g.validate();
    RegionLayout l;
    const std::uint64_t bs = g.block_size;
    l.volume_table_offset = bs;
    l.volume_table_size = align_up(std::uint64_t{g.max_volumes} * kVolumeSlotSize, bs);
    l.snapshot_table_offset = l.volume_table_offset + l.volume_table_size;
    l.snapshot_table_size = align_up(std::uint64_t{g.max_snapshots} * kSnapshotSlotSize, bs);
    l.tracking_offset = l.snapshot_table_offset + l.snapshot_table_size;
    l.descriptor_size = descriptor_size(g.blocks_per_extent);

    const std::uint64_t extent = g.extent_size();
    auto footprint = [&](std::uint64_t n) {
        return l.tracking_offset + align_up(n * l.descriptor_size, bs) + n * extent;
    };
    std::uint64_t n = g.device_size > l.tracking_offset ? (g.device_size - l.tracking_offset) / extent : 0;
    while (n > 0 && footprint(n) > g.device_size) --n;
    if (n == 0) {
        throw Error(Errc::invalid_argument,
                    fmt::format("device too small: {} bytes cannot hold metadata plus one {}-byte extent",
                                g.device_size, extent));
    }
    l.extent_count = n;
    l.tracking_size = align_up(n * l.descriptor_size, bs);
    l.data_offset = l.tracking_offset + l.tracking_size;
    return l;
}

bool has_magic(std::span<const std::byte> block) noexcept {
    return block.size() >= kMagic.size() && std::memcmp(block.data(), kMagic.data(), kMagic.size()) == 0;
}

void encode_superblock(const Superblock& sb, std::span<std::byte> block) {
    std::fill(block.begin(), block.end(), std::byte{0});
    std::byte* p = block.data();
    std::memcpy(p, kMagic.data(), kMagic.size());
    store_le<std::uint32_t>(p + 8, sb.format_version);
    store_le<std::uint32_t>(p + 12, sb.geometry.block_size);
    store_le<std::uint32_t>(p + 16, sb.geometry.blocks_per_extent);
    store_le<std::uint32_t>(p + 20, sb.geometry.max_volumes);
    store_le<std::uint32_t>(p + 24, sb.geometry.max_snapshots);
    store_le<std::uint64_t>(p + 28, sb.geometry.device_size);
    store_le<std::uint64_t>(p + 36, sb.allocation_mark);
    store_le<std::uint32_t>(p + 44, sb.next_snapshot_id);
    store_le<std::uint64_t>(p + 48, sb.metadata_offset);
    store_le<std::uint64_t>(p + 56, sb.tracking_offset);
    store_le<std::uint64_t>(p + 64, sb.data_offset);
}

Superblock decode_superblock(std::span<const std::byte> block) {
    if (block.size() < kSuperblockEncodedSize || !has_magic(block)) {
        throw Error(Errc::corrupt, "bad magic: not a DBS device");
    }
    const std::byte* p = block.data();
    Superblock sb;
    sb.format_version = load_le<std::uint32_t>(p + 8);
    if (sb.format_version != kFormatVersion) {
        throw Error(Errc::corrupt,
                    fmt::format("format version mismatch: found {}, expected {}", sb.format_version, kFormatVersion));
    }
    sb.geometry.block_size = load_le<std::uint32_t>(p + 12);
    sb.geometry.blocks_per_extent = load_le<std::uint32_t>(p + 16);
    sb.geometry.max_volumes = load_le<std::uint32_t>(p + 20);
    sb.geometry.max_snapshots = load_le<std::uint32_t>(p + 24);
    sb.geometry.device_size = load_le<std::uint64_t>(p + 28);
    sb.allocation_mark = load_le<std::uint64_t>(p + 36);
    sb.next_snapshot_id = load_le<std::uint32_t>(p + 44);
    sb.metadata_offset = load_le<std::uint64_t>(p + 48);
    sb.tracking_offset = load_le<std::uint64_t>(p + 56);
    sb.data_offset = load_le<std::uint64_t>(p + 64);
    return sb;
}

void encode_volume_slot(const VolumeSlot& slot, std::span<std::byte, kVolumeSlotSize> out) {
    std::fill(out.begin(), out.end(), std::byte{0});
    out[0] = std::byte{slot.live ? std::uint8_t{1} : std::uint8_t{0}};
    store_le<std::uint32_t>(out.data() + 4, slot.latest_snapshot_id);
    store_le<std::uint64_t>(out.data() + 8, slot.volume_size);
    std::memcpy(out.data() + 16, slot.name.data(), std::min(slot.name.size(), kMaxVolumeName));
}

VolumeSlot decode_volume_slot(std::span<const std::byte, kVolumeSlotSize> in) {
    VolumeSlot slot;
    slot.live = in[0] != std::byte{0};
    slot.latest_snapshot_id = load_le<std::uint32_t>(in.data() + 4);
    slot.volume_size = load_le<std::uint64_t>(in.data() + 8);
    const char* name = reinterpret_cast<const char*>(in.data() + 16);
    slot.name.assign(name, ::strnlen(name, kMaxVolumeName));
    return slot;
}

void encode_snapshot_slot(const SnapshotSlot& slot, std::span<std::byte, kSnapshotSlotSize> out) {
    std::fill(out.begin(), out.end(), std::byte{0});
    out[0] = std::byte{slot.live ? std::uint8_t{1} : std::uint8_t{0}};
    store_le<std::uint32_t>(out.data() + 4, slot.id);
    store_le<std::uint32_t>(out.data() + 8, slot.parent_id);
    store_le<std::uint32_t>(out.data() + 12, slot.volume_slot);
    store_le<std::uint64_t>(out.data() + 16, slot.created_at);
}

SnapshotSlot decode_snapshot_slot(std::span<const std::byte, kSnapshotSlotSize> in) {
    SnapshotSlot slot;
    slot.live = in[0] != std::byte{0};
    slot.id = load_le<std::uint32_t>(in.data() + 4);
    slot.parent_id = load_le<std::uint32_t>(in.data() + 8);
    slot.volume_slot = load_le<std::uint32_t>(in.data() + 12);
    slot.created_at = load_le<std::uint64_t>(in.data() + 16);
    return slot;
}

bool Bitmap::none() const noexcept {
    return std::all_of(words_.begin(), words_.end(), [](std::uint64_t w) { return w == 0; });
}

std::uint32_t Bitmap::count() const noexcept {
    std::uint32_t n = 0;
    for (auto w : words_) n += static_cast<std::uint32_t>(std::popcount(w));
    return n;
}

void Bitmap::encode(std::span<std::byte> out) const noexcept {
    const std::size_t nbytes = bytes::div_ceil(bits_, 8);
    for (std::size_t i = 0; i < nbytes && i < out.size(); ++i) {
        out[i] = static_cast<std::byte>((words_[i / 8] >> ((i % 8) * 8)) & 0xff);
    }
}

void Bitmap::decode(std::span<const std::byte> in) noexcept {
    clear();
    const std::size_t nbytes = bytes::div_ceil(bits_, 8);
    for (std::size_t i = 0; i < nbytes && i < in.size(); ++i) {
        words_[i / 8] |= static_cast<std::uint64_t>(in[i]) << ((i % 8) * 8);
    }
    // Bits past the end never count as set.
    if (bits_ % 64 != 0 && !words_.empty()) words_.back() &= (std::uint64_t{1} << (bits_ % 64)) - 1;
}

void encode_descriptor(const ExtentDescriptor& d, std::span<std::byte> out) {
    std::fill(out.begin(), out.end(), std::byte{0});
    store_le<std::uint32_t>(out.data(), d.owner);
    store_le<std::uint64_t>(out.data() + 8, d.logical_index);
    d.bitmap.encode(out.subspan(kDescriptorHeaderSize));
}

ExtentDescriptor decode_descriptor(std::span<const std::byte> in, std::uint32_t blocks_per_extent) {
    ExtentDescriptor d;
    d.owner = load_le<std::uint32_t>(in.data());
    d.logical_index = load_le<std::uint64_t>(in.data() + 8);
    d.bitmap = Bitmap(blocks_per_extent);
    d.bitmap.decode(in.subspan(kDescriptorHeaderSize));
    return d;
}

}  // namespace minihorn::dbs
