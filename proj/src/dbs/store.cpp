#include "minihorn/dbs/store.hpp"

#include <algorithm>
#include <cstring>
#include <ctime>
#include <limits>
#include <set>
#include <unordered_set>

#include <fmt/format.h>

#include "minihorn/block_target.hpp"
#include "minihorn/error.hpp"
#include "minihorn/util/aligned_buffer.hpp"
#include "minihorn/util/bytes.hpp"

namespace minihorn::dbs {

namespace {

constexpr std::size_t kIoAlignment = 4096;

std::uint64_t now_seconds() { return static_cast<std::uint64_t>(std::time(nullptr)); }

// Per-thread aligned scratch space. Data and metadata paths use separate buffers
// because a data write may trigger a superblock update.
enum class Scratch { data, meta };

std::byte* scratch(Scratch which, std::size_t size) {
    thread_local AlignedBuffer data_buf;
    thread_local AlignedBuffer meta_buf;
    AlignedBuffer& buf = which == Scratch::data ? data_buf : meta_buf;
    if (buf.size() < size) buf = AlignedBuffer(bytes::align_up(size, 64 * 1024), kIoAlignment);
    return buf.data();
}

std::size_t io_alignment(const DeviceGeometry& g) { return std::max<std::size_t>(g.block_size, kIoAlignment); }

void read_region(const DirectFile& file, std::uint64_t offset, AlignedBuffer& buf) {
    constexpr std::size_t kChunk = 8u << 20;
    for (std::size_t done = 0; done < buf.size(); done += kChunk) {
        std::size_t n = std::min(kChunk, buf.size() - done);
        file.pread_exact(offset + done, buf.span().subspan(done, n));
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Format / open

Superblock Store::init(const std::filesystem::path& path, DeviceGeometry geometry, InitOptions options) {
    DirectFile file(path, DirectFile::Mode::read_write, options.direct_io);
    const std::uint64_t actual = file.size();
    if (geometry.device_size == 0) geometry.device_size = actual;
    geometry.validate();
    if (geometry.device_size > actual) {
        throw Error(Errc::invalid_argument,
                    fmt::format("device too small: {} bytes requested, target has {}", geometry.device_size, actual));
    }
    const RegionLayout layout = compute_layout(geometry);
    const std::size_t align = io_alignment(geometry);

    AlignedBuffer block(geometry.block_size, align);
    if (actual >= geometry.block_size) {
        file.pread_exact(0, block.span());
        if (has_magic(block.span()) && !options.force) {
            throw Error(Errc::conflict, fmt::format("{} is already formatted (use force to overwrite)", path.string()));
        }
    }

    // Zero the metadata and descriptor regions first so an interrupted format
    // never leaves a valid superblock in front of stale tables.
    AlignedBuffer zeros(std::min<std::uint64_t>(1u << 20, layout.data_offset), align);
    for (std::uint64_t pos = layout.metadata_offset(); pos < layout.data_offset;) {
        std::uint64_t n = std::min<std::uint64_t>(zeros.size(), layout.data_offset - pos);
        file.pwrite_exact(pos, zeros.span().first(n));
        pos += n;
    }

    Superblock sb;
    sb.geometry = geometry;
    sb.allocation_mark = 0;
    sb.next_snapshot_id = 1;
    sb.metadata_offset = layout.metadata_offset();
    sb.tracking_offset = layout.tracking_offset;
    sb.data_offset = layout.data_offset;
    encode_superblock(sb, block.span());
    file.pwrite_exact(0, block.span());
    file.sync();
    return sb;
}

std::unique_ptr<Store> Store::open(const std::filesystem::path& path, OpenOptions options) {
    DirectFile file(path, DirectFile::Mode::read_write, options.direct_io);
    const std::uint64_t actual = file.size();
    if (actual < kIoAlignment) throw Error(Errc::corrupt, "bad magic: device too small to hold a superblock");

    AlignedBuffer head(kIoAlignment, kIoAlignment);
    file.pread_exact(0, head.span());
    Superblock sb = decode_superblock(head.span());

    RegionLayout layout;
    try {
        layout = compute_layout(sb.geometry);
    } catch (const Error& e) {
        throw Error(Errc::corrupt, fmt::format("superblock geometry invalid: {}", e.what()));
    }
    if (layout.metadata_offset() != sb.metadata_offset || layout.tracking_offset != sb.tracking_offset ||
        layout.data_offset != sb.data_offset) {
        throw Error(Errc::corrupt, "superblock region offsets inconsistent with geometry");
    }
    if (actual < sb.geometry.device_size) {
        throw Error(Errc::corrupt, fmt::format("geometry inconsistent with device size: superblock says {} bytes, "
                                               "device has {}",
                                               sb.geometry.device_size, actual));
    }
    if (sb.allocation_mark > layout.extent_count) {
        throw Error(Errc::corrupt, "allocation mark beyond data region");
    }

    std::unique_ptr<Store> store(new Store(std::move(file), sb, layout));
    store->load();
    return store;
}

Store::Store(DirectFile file, Superblock sb, RegionLayout layout)
    : file_(std::move(file)), sb_(sb), layout_(layout) {}

Store::~Store() {
    try {
        if (!file_.direct()) file_.sync();
    } catch (...) {
    }
}

void Store::load() {
    const auto& g = sb_.geometry;
    const std::size_t align = io_alignment(g);

    AlignedBuffer vt(layout_.volume_table_size, align);
    read_region(file_, layout_.volume_table_offset, vt);
    volume_slots_.resize(g.max_volumes);
    for (std::uint32_t i = 0; i < g.max_volumes; ++i) {
        volume_slots_[i] = decode_volume_slot(
            std::span<const std::byte, kVolumeSlotSize>(vt.data() + std::size_t{i} * kVolumeSlotSize, kVolumeSlotSize));
    }

    AlignedBuffer st(layout_.snapshot_table_size, align);
    read_region(file_, layout_.snapshot_table_offset, st);
    snapshot_slots_.resize(g.max_snapshots);
    for (std::uint32_t i = 0; i < g.max_snapshots; ++i) {
        snapshot_slots_[i] = decode_snapshot_slot(std::span<const std::byte, kSnapshotSlotSize>(
            st.data() + std::size_t{i} * kSnapshotSlotSize, kSnapshotSlotSize));
    }

    volumes_.resize(g.max_volumes);
    for (std::uint32_t i = 0; i < g.max_volumes; ++i) {
        const auto& vs = volume_slots_[i];
        if (!vs.live) continue;
        if (vs.volume_size == 0 || vs.volume_size % g.block_size != 0) {
            throw Error(Errc::corrupt, fmt::format("volume slot {} has invalid size {}", i, vs.volume_size));
        }
        if (volume_names_.contains(vs.name)) {
            throw Error(Errc::corrupt, fmt::format("duplicate volume name '{}'", vs.name));
        }
        auto vol = std::make_unique<Volume>();
        vol->slot = i;
        vol->name = vs.name;
        vol->size = vs.volume_size;
        vol->latest = vs.latest_snapshot_id;
        volume_names_.emplace(vs.name, i);
        volumes_[i] = std::move(vol);
    }

    for (std::uint32_t i = 0; i < g.max_snapshots; ++i) {
        const auto& ss = snapshot_slots_[i];
        if (!ss.live) continue;
        if (ss.id == kNoSnapshot || ss.id >= sb_.next_snapshot_id || snapshots_.contains(ss.id)) {
            throw Error(Errc::corrupt, fmt::format("snapshot slot {} has invalid id {}", i, ss.id));
        }
        if (ss.volume_slot >= g.max_volumes || !volumes_[ss.volume_slot]) {
            throw Error(Errc::corrupt, fmt::format("snapshot {} belongs to dead volume slot {}", ss.id, ss.volume_slot));
        }
        Snapshot s;
        s.id = ss.id;
        s.parent = ss.parent_id;
        s.volume_slot = ss.volume_slot;
        s.table_slot = i;
        s.created_at = ss.created_at;
        s.extents.assign(logical_extents(volumes_[ss.volume_slot]->size), kNoExtent);
        snapshots_.emplace(s.id, std::move(s));
    }

    for (const auto& vol : volumes_) {
        if (!vol) continue;
        auto it = snapshots_.find(vol->latest);
        if (it == snapshots_.end() || it->second.volume_slot != vol->slot) {
            throw Error(Errc::corrupt, fmt::format("volume '{}' has no valid latest snapshot", vol->name));
        }
        // Parent links must terminate at a root.
        std::size_t steps = 0;
        for (SnapshotId s = vol->latest; s != kNoSnapshot; s = snapshots_.at(s).parent) {
            if (!snapshots_.contains(s) || ++steps > snapshots_.size()) {
                throw Error(Errc::corrupt, fmt::format("broken snapshot chain in volume '{}'", vol->name));
            }
        }
    }

    AlignedBuffer tr(layout_.tracking_size, align);
    read_region(file_, layout_.tracking_offset, tr);
    descriptors_.resize(layout_.extent_count);
    for (std::uint64_t i = 0; i < layout_.extent_count; ++i) {
        auto& d = descriptors_[i];
        d = decode_descriptor(tr.span().subspan(i * layout_.descriptor_size, layout_.descriptor_size),
                              g.blocks_per_extent);
        auto it = d.owner == kNoSnapshot ? snapshots_.end() : snapshots_.find(d.owner);
        if (it == snapshots_.end()) {
            // Free, or left behind by a snapshot that no longer exists.
            d.owner = kNoSnapshot;
            d.logical_index = 0;
            d.bitmap.clear();
            if (i < sb_.allocation_mark) recycled_.push_back(static_cast<std::uint32_t>(i));
            continue;
        }
        if (i >= sb_.allocation_mark) {
            throw Error(Errc::corrupt, fmt::format("extent {} owned above allocation mark {}", i, sb_.allocation_mark));
        }
        auto& extents = it->second.extents;
        if (d.logical_index >= extents.size() || extents[d.logical_index] != kNoExtent) {
            throw Error(Errc::corrupt, fmt::format("extent {} has invalid or duplicate logical index {} for snapshot {}",
                                                   i, d.logical_index, d.owner));
        }
        extents[d.logical_index] = static_cast<std::uint32_t>(i);
    }
    std::reverse(recycled_.begin(), recycled_.end());

    for (auto& vol : volumes_) {
        if (vol) rebuild_view(*vol);
    }
}

ExtentIndexDump Store::scan_index(const std::filesystem::path& path) {
    DirectFile file(path, DirectFile::Mode::read_only, false);
    AlignedBuffer head(kIoAlignment, kIoAlignment);
    file.pread_exact(0, head.span());
    const Superblock sb = decode_superblock(head.span());
    const RegionLayout layout = compute_layout(sb.geometry);

    AlignedBuffer st(layout.snapshot_table_size, kIoAlignment);
    read_region(file, layout.snapshot_table_offset, st);
    std::set<SnapshotId> live;
    for (std::uint32_t i = 0; i < sb.geometry.max_snapshots; ++i) {
        auto slot = decode_snapshot_slot(std::span<const std::byte, kSnapshotSlotSize>(
            st.data() + std::size_t{i} * kSnapshotSlotSize, kSnapshotSlotSize));
        if (slot.live) live.insert(slot.id);
    }

    ExtentIndexDump dump;
    dump.allocation_mark = sb.allocation_mark;
    for (SnapshotId id : live) dump.snapshot_maps[id];

    AlignedBuffer tr(layout.tracking_size, kIoAlignment);
    read_region(file, layout.tracking_offset, tr);
    for (std::uint64_t i = 0; i < layout.extent_count; ++i) {
        auto d = decode_descriptor(tr.span().subspan(i * layout.descriptor_size, layout.descriptor_size),
                                   sb.geometry.blocks_per_extent);
        if (d.owner != kNoSnapshot && live.contains(d.owner)) {
            dump.snapshot_maps[d.owner][d.logical_index] = static_cast<std::uint32_t>(i);
        } else {
            dump.free_extents.push_back(static_cast<std::uint32_t>(i));
        }
    }
    return dump;
}

// ---------------------------------------------------------------------------
// Lookups

Store::Volume& Store::volume_by_name(std::string_view name) {
    auto it = volume_names_.find(std::string(name));
    if (it == volume_names_.end()) throw Error(Errc::not_found, fmt::format("volume '{}' not found", name));
    return *volumes_[it->second];
}

const Store::Volume& Store::volume_by_name(std::string_view name) const {
    return const_cast<Store*>(this)->volume_by_name(name);
}

Store::Snapshot& Store::snapshot(SnapshotId id) {
    auto it = snapshots_.find(id);
    if (it == snapshots_.end()) throw Error(Errc::not_found, fmt::format("snapshot {} not found", id));
    return it->second;
}

const Store::Snapshot& Store::snapshot(SnapshotId id) const { return const_cast<Store*>(this)->snapshot(id); }

std::vector<SnapshotId> Store::chain_of(const Volume& vol) const {
    std::vector<SnapshotId> chain;
    for (SnapshotId s = vol.latest; s != kNoSnapshot; s = snapshots_.at(s).parent) chain.push_back(s);
    return chain;
}

std::vector<SnapshotId> Store::children_of(SnapshotId id) const {
    std::vector<SnapshotId> kids;
    for (const auto& [sid, s] : snapshots_) {
        if (s.parent == id) kids.push_back(sid);
    }
    return kids;
}

std::uint64_t Store::logical_extents(std::uint64_t volume_size) const noexcept {
    return bytes::div_ceil(volume_size, sb_.geometry.extent_size());
}

void Store::check_name(std::string_view name) const {
    if (name.empty() || name.size() > kMaxVolumeName || name.find('\0') != std::string_view::npos) {
        throw Error(Errc::invalid_argument,
                    fmt::format("invalid volume name '{}' (1..{} bytes, no NUL)", name, kMaxVolumeName));
    }
    if (volume_names_.contains(std::string(name))) {
        throw Error(Errc::conflict, fmt::format("volume '{}' already exists", name));
    }
}

std::uint32_t Store::free_volume_slot() const {
    for (std::uint32_t i = 0; i < volumes_.size(); ++i) {
        if (!volumes_[i]) return i;
    }
    throw Error(Errc::conflict, fmt::format("volume slots exhausted ({} max)", volumes_.size()));
}

std::uint32_t Store::free_snapshot_slots(std::uint32_t needed, std::vector<std::uint32_t>& out) const {
    out.clear();
    for (std::uint32_t i = 0; i < snapshot_slots_.size() && out.size() < needed; ++i) {
        if (!snapshot_slots_[i].live) out.push_back(i);
    }
    if (out.size() < needed) {
        throw Error(Errc::conflict, fmt::format("snapshot slots exhausted ({} max)", snapshot_slots_.size()));
    }
    return out.front();
}

std::shared_mutex& Store::extent_lock(std::uint32_t volume_slot, std::uint64_t lext) const noexcept {
    return extent_locks_[(std::uint64_t{volume_slot} * 1000003u + lext) % kExtentLockStripes];
}

std::mutex& Store::descriptor_lock(std::uint32_t phys) const noexcept {
    const std::uint64_t per_block = sb_.geometry.block_size / layout_.descriptor_size;
    return descriptor_locks_[(phys / per_block) % kDescriptorLockStripes];
}

// ---------------------------------------------------------------------------
// Persistence

void Store::persist_superblock() {
    const std::uint32_t bs = sb_.geometry.block_size;
    std::byte* buf = scratch(Scratch::meta, bs);
    encode_superblock(sb_, {buf, bs});
    file_.pwrite_exact(0, {buf, bs});
    metadata_writes_.fetch_add(1, std::memory_order_relaxed);
}

void Store::persist_volume_slot(std::uint32_t slot) {
    const std::uint32_t bs = sb_.geometry.block_size;
    const std::uint64_t per_block = bs / kVolumeSlotSize;
    const std::uint64_t first = slot / per_block * per_block;
    std::byte* buf = scratch(Scratch::meta, bs);
    std::memset(buf, 0, bs);
    for (std::uint64_t i = first; i < first + per_block && i < volume_slots_.size(); ++i) {
        encode_volume_slot(volume_slots_[i],
                           std::span<std::byte, kVolumeSlotSize>(buf + (i - first) * kVolumeSlotSize, kVolumeSlotSize));
    }
    file_.pwrite_exact(layout_.volume_table_offset + first * kVolumeSlotSize, {buf, bs});
    metadata_writes_.fetch_add(1, std::memory_order_relaxed);
}

void Store::persist_snapshot_slot(std::uint32_t slot) {
    const std::uint32_t bs = sb_.geometry.block_size;
    const std::uint64_t per_block = bs / kSnapshotSlotSize;
    const std::uint64_t first = slot / per_block * per_block;
    std::byte* buf = scratch(Scratch::meta, bs);
    std::memset(buf, 0, bs);
    for (std::uint64_t i = first; i < first + per_block && i < snapshot_slots_.size(); ++i) {
        encode_snapshot_slot(snapshot_slots_[i], std::span<std::byte, kSnapshotSlotSize>(
                                                     buf + (i - first) * kSnapshotSlotSize, kSnapshotSlotSize));
    }
    file_.pwrite_exact(layout_.snapshot_table_offset + first * kSnapshotSlotSize, {buf, bs});
    metadata_writes_.fetch_add(1, std::memory_order_relaxed);
}

void Store::persist_descriptor(std::uint32_t phys) {
    const std::uint64_t per_block = sb_.geometry.block_size / layout_.descriptor_size;
    persist_descriptor_block_unlocked(phys / per_block);
}

void Store::persist_descriptor_block_unlocked(std::uint64_t block) {
    const std::uint32_t bs = sb_.geometry.block_size;
    const std::uint64_t per_block = bs / layout_.descriptor_size;
    const std::uint64_t first = block * per_block;
    std::byte* buf = scratch(Scratch::meta, bs);
    std::memset(buf, 0, bs);
    for (std::uint64_t i = first; i < first + per_block && i < descriptors_.size(); ++i) {
        encode_descriptor(descriptors_[i], {buf + (i - first) * layout_.descriptor_size, layout_.descriptor_size});
    }
    file_.pwrite_exact(layout_.tracking_offset + block * bs, {buf, bs});
    metadata_writes_.fetch_add(1, std::memory_order_relaxed);
}

// ---------------------------------------------------------------------------
// Extent allocation

std::uint32_t Store::allocate_extent() {
    std::lock_guard lk(alloc_mu_);
    if (!recycled_.empty()) {
        std::uint32_t p = recycled_.back();
        recycled_.pop_back();
        return p;
    }
    if (sb_.allocation_mark >= layout_.extent_count) {
        throw Error(Errc::no_space, "device full: no free extent");
    }
    auto p = static_cast<std::uint32_t>(sb_.allocation_mark++);
    try {
        persist_superblock();
    } catch (...) {
        --sb_.allocation_mark;
        throw;
    }
    return p;
}

void Store::release_extent(std::uint32_t phys) {
    std::lock_guard lk(alloc_mu_);
    recycled_.push_back(phys);
}

std::uint64_t Store::data_position(std::uint32_t phys, std::uint32_t block) const noexcept {
    return layout_.data_offset + std::uint64_t{phys} * sb_.geometry.extent_size() +
           std::uint64_t{block} * sb_.geometry.block_size;
}

void Store::read_data(std::uint64_t pos, std::span<std::byte> out) const {
    data_reads_.fetch_add(1, std::memory_order_relaxed);
    if (!file_.direct() || is_aligned(out.data(), kIoAlignment)) {
        file_.pread_exact(pos, out);
        return;
    }
    std::byte* buf = scratch(Scratch::data, out.size());
    file_.pread_exact(pos, {buf, out.size()});
    std::memcpy(out.data(), buf, out.size());
}

void Store::write_data(std::uint64_t pos, std::span<const std::byte> data) {
    data_writes_.fetch_add(1, std::memory_order_relaxed);
    if (!file_.direct() || is_aligned(data.data(), kIoAlignment)) {
        file_.pwrite_exact(pos, data);
        return;
    }
    std::byte* buf = scratch(Scratch::data, data.size());
    std::memcpy(buf, data.data(), data.size());
    file_.pwrite_exact(pos, {buf, data.size()});
}

// ---------------------------------------------------------------------------
// Resolution

std::uint32_t Store::resolve_block(SnapshotId from, std::uint64_t lext, std::uint32_t block) const {
    for (SnapshotId s = from; s != kNoSnapshot;) {
        const Snapshot& snap = snapshots_.at(s);
        if (lext < snap.extents.size()) {
            std::uint32_t p = snap.extents[lext];
            if (p != kNoExtent && descriptors_[p].bitmap.test(block)) return p;
        }
        s = snap.parent;
    }
    return kNoExtent;
}

void Store::rebuild_view(Volume& vol) {
    const std::uint32_t bpe = sb_.geometry.blocks_per_extent;
    const auto chain = chain_of(vol);
    const std::uint64_t n = logical_extents(vol.size);
    vol.view.clear();
    vol.view.resize(n);
    for (std::uint64_t lext = 0; lext < n; ++lext) {
        // Root first so newer snapshots overwrite older entries.
        for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
            const Snapshot& s = snapshots_.at(*it);
            if (lext >= s.extents.size() || s.extents[lext] == kNoExtent) continue;
            const std::uint32_t p = s.extents[lext];
            const Bitmap& bm = descriptors_[p].bitmap;
            auto& rv = vol.view[lext];
            if (!rv) {
                rv = std::make_unique<std::uint32_t[]>(bpe);
                std::fill_n(rv.get(), bpe, kNoExtent);
            }
            for (std::uint32_t b = 0; b < bpe; ++b) {
                if (bm.test(b)) rv[b] = p;
            }
        }
    }
}

void Store::rebuild_views_containing(SnapshotId id) {
    for (auto& vol : volumes_) {
        if (!vol) continue;
        auto chain = chain_of(*vol);
        if (std::find(chain.begin(), chain.end(), id) != chain.end()) rebuild_view(*vol);
    }
}

// ---------------------------------------------------------------------------
// Block I/O

void Store::read(std::string_view volume, std::uint64_t offset, std::span<std::byte> out) const {
    std::shared_lock meta(meta_mu_);
    const Volume& vol = volume_by_name(volume);
    const std::uint32_t bs = sb_.geometry.block_size;
    check_block_range(offset, out.size(), bs, vol.size);
    const std::uint64_t extent = sb_.geometry.extent_size();
    while (!out.empty()) {
        const std::uint64_t lext = offset / extent;
        const std::uint64_t within = offset % extent;
        const std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(out.size(), extent - within));
        {
            std::shared_lock lk(extent_lock(vol.slot, lext));
            read_extent(vol, lext, static_cast<std::uint32_t>(within / bs), out.first(n));
        }
        offset += n;
        out = out.subspan(n);
    }
}

void Store::read_extent(const Volume& vol, std::uint64_t lext, std::uint32_t first_block,
                        std::span<std::byte> out) const {
    const std::uint32_t bs = sb_.geometry.block_size;
    const auto nblocks = static_cast<std::uint32_t>(out.size() / bs);
    const std::uint32_t* rv = vol.view[lext].get();
    if (rv == nullptr) {
        std::memset(out.data(), 0, out.size());
        return;
    }
    std::uint32_t b = 0;
    while (b < nblocks) {
        const std::uint32_t phys = rv[first_block + b];
        std::uint32_t run = 1;
        while (b + run < nblocks && rv[first_block + b + run] == phys) ++run;
        auto dst = out.subspan(std::size_t{b} * bs, std::size_t{run} * bs);
        if (phys == kNoExtent) {
            std::memset(dst.data(), 0, dst.size());
        } else {
            read_data(data_position(phys, first_block + b), dst);
        }
        b += run;
    }
}

void Store::write(std::string_view volume, std::uint64_t offset, std::span<const std::byte> data) {
    std::shared_lock meta(meta_mu_);
    Volume& vol = volume_by_name(volume);
    const std::uint32_t bs = sb_.geometry.block_size;
    check_block_range(offset, data.size(), bs, vol.size);
    Snapshot& latest = snapshot(vol.latest);
    const std::uint64_t extent = sb_.geometry.extent_size();
    while (!data.empty()) {
        const std::uint64_t lext = offset / extent;
        const std::uint64_t within = offset % extent;
        const std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(data.size(), extent - within));
        {
            std::unique_lock lk(extent_lock(vol.slot, lext));
            write_extent(vol, latest, lext, static_cast<std::uint32_t>(within / bs), data.first(n));
        }
        offset += n;
        data = data.subspan(n);
    }
}

void Store::write_extent(Volume& vol, Snapshot& latest, std::uint64_t lext, std::uint32_t first_block,
                         std::span<const std::byte> data) {
    const std::uint32_t bs = sb_.geometry.block_size;
    const std::uint32_t bpe = sb_.geometry.blocks_per_extent;
    const auto nblocks = static_cast<std::uint32_t>(data.size() / bs);

    std::uint32_t phys = latest.extents[lext];
    const bool fresh = phys == kNoExtent;
    if (fresh) phys = allocate_extent();

    // Data first, then the descriptor that makes it visible after a restart.
    try {
        write_data(data_position(phys, first_block), data);
    } catch (...) {
        if (fresh) release_extent(phys);
        throw;
    }
    {
        std::lock_guard lk(descriptor_lock(phys));
        auto& d = descriptors_[phys];
        bool changed = fresh;
        if (fresh) {
            d.owner = latest.id;
            d.logical_index = lext;
            d.bitmap.clear();
        }
        for (std::uint32_t b = first_block; b < first_block + nblocks; ++b) {
            if (!d.bitmap.test(b)) {
                d.bitmap.set(b);
                changed = true;
            }
        }
        if (changed) persist_descriptor(phys);
    }
    if (fresh) latest.extents[lext] = phys;

    auto& rv = vol.view[lext];
    if (!rv) {
        rv = std::make_unique<std::uint32_t[]>(bpe);
        std::fill_n(rv.get(), bpe, kNoExtent);
    }
    std::fill_n(rv.get() + first_block, nblocks, phys);
}

void Store::unmap(std::string_view volume, std::uint64_t offset, std::uint64_t length) {
    std::shared_lock meta(meta_mu_);
    Volume& vol = volume_by_name(volume);
    const std::uint32_t bs = sb_.geometry.block_size;
    check_block_range(offset, length, bs, vol.size);
    Snapshot& latest = snapshot(vol.latest);
    const std::uint64_t extent = sb_.geometry.extent_size();
    while (length > 0) {
        const std::uint64_t lext = offset / extent;
        const std::uint64_t within = offset % extent;
        const std::uint64_t n = std::min<std::uint64_t>(length, extent - within);
        {
            std::unique_lock lk(extent_lock(vol.slot, lext));
            unmap_extent(vol, latest, lext, static_cast<std::uint32_t>(within / bs), static_cast<std::uint32_t>(n / bs));
        }
        offset += n;
        length -= n;
    }
}

void Store::unmap_extent(Volume& vol, Snapshot& latest, std::uint64_t lext, std::uint32_t first_block,
                         std::uint32_t nblocks) {
    const std::uint32_t phys = latest.extents[lext];
    if (phys == kNoExtent) return;  // ancestors' blocks stay visible

    bool freed = false;
    {
        std::lock_guard lk(descriptor_lock(phys));
        auto& d = descriptors_[phys];
        bool changed = false;
        for (std::uint32_t b = first_block; b < first_block + nblocks; ++b) {
            if (d.bitmap.test(b)) {
                d.bitmap.reset(b);
                changed = true;
            }
        }
        if (changed && d.bitmap.none()) {
            d.owner = kNoSnapshot;
            d.logical_index = 0;
            freed = true;
        }
        if (changed) persist_descriptor(phys);
    }
    if (freed) latest.extents[lext] = kNoExtent;

    if (auto& rv = vol.view[lext]) {
        for (std::uint32_t b = first_block; b < first_block + nblocks; ++b) {
            if (rv[b] == phys) rv[b] = resolve_block(latest.parent, lext, b);
        }
    }
    if (freed) release_extent(phys);
}

// ---------------------------------------------------------------------------
// Administration

Store::Snapshot& Store::add_snapshot(SnapshotId parent, std::uint32_t volume_slot, std::uint32_t table_slot,
                                     std::uint64_t extents) {
    SnapshotId id;
    {
        std::lock_guard lk(alloc_mu_);
        if (sb_.next_snapshot_id == std::numeric_limits<SnapshotId>::max()) {
            throw Error(Errc::conflict, "snapshot id space exhausted");
        }
        id = sb_.next_snapshot_id++;
        persist_superblock();
    }
    const std::uint64_t created = now_seconds();
    snapshot_slots_[table_slot] = SnapshotSlot{true, id, parent, volume_slot, created};
    persist_snapshot_slot(table_slot);

    Snapshot s;
    s.id = id;
    s.parent = parent;
    s.volume_slot = volume_slot;
    s.table_slot = table_slot;
    s.created_at = created;
    s.extents.assign(extents, kNoExtent);
    return snapshots_.emplace(id, std::move(s)).first->second;
}

VolumeInfo Store::create_volume(std::string_view name, std::uint64_t size) {
    std::unique_lock meta(meta_mu_);
    check_name(name);
    if (size == 0 || size % sb_.geometry.block_size != 0) {
        throw Error(Errc::invalid_argument,
                    fmt::format("volume size {} must be a positive multiple of the block size {}", size,
                                sb_.geometry.block_size));
    }
    const std::uint32_t vslot = free_volume_slot();
    std::vector<std::uint32_t> tslots;
    free_snapshot_slots(1, tslots);

    Snapshot& root = add_snapshot(kNoSnapshot, vslot, tslots[0], logical_extents(size));
    volume_slots_[vslot] = VolumeSlot{true, root.id, size, std::string(name)};
    persist_volume_slot(vslot);

    auto vol = std::make_unique<Volume>();
    vol->slot = vslot;
    vol->name = std::string(name);
    vol->size = size;
    vol->latest = root.id;
    vol->view.resize(logical_extents(size));
    volume_names_.emplace(vol->name, vslot);
    volumes_[vslot] = std::move(vol);
    return volume_info(*volumes_[vslot]);
}

void Store::delete_volume(std::string_view name) {
    std::unique_lock meta(meta_mu_);
    Volume& vol = volume_by_name(name);

    std::vector<SnapshotId> own;
    for (SnapshotId s = vol.latest; s != kNoSnapshot && snapshots_.at(s).volume_slot == vol.slot;
         s = snapshots_.at(s).parent) {
        own.push_back(s);
    }
    const std::unordered_set<SnapshotId> own_set(own.begin(), own.end());
    for (const auto& [sid, s] : snapshots_) {
        if (!own_set.contains(sid) && own_set.contains(s.parent)) {
            throw Error(Errc::conflict,
                        fmt::format("volume '{}' snapshot {} is in use by clone snapshot {}", name, s.parent, sid));
        }
    }

    const std::uint64_t per_block = sb_.geometry.block_size / layout_.descriptor_size;
    std::set<std::uint64_t> dirty;
    std::vector<std::uint32_t> freed;
    for (SnapshotId sid : own) {
        for (std::uint32_t p : snapshots_.at(sid).extents) {
            if (p == kNoExtent) continue;
            auto& d = descriptors_[p];
            d.owner = kNoSnapshot;
            d.logical_index = 0;
            d.bitmap.clear();
            dirty.insert(p / per_block);
            freed.push_back(p);
        }
    }
    for (auto block : dirty) persist_descriptor_block_unlocked(block);
    for (auto p : freed) release_extent(p);

    for (SnapshotId sid : own) {
        const std::uint32_t tslot = snapshots_.at(sid).table_slot;
        snapshot_slots_[tslot] = SnapshotSlot{};
        persist_snapshot_slot(tslot);
        snapshots_.erase(sid);
    }
    const std::uint32_t vslot = vol.slot;
    volume_slots_[vslot] = VolumeSlot{};
    persist_volume_slot(vslot);
    volume_names_.erase(vol.name);
    volumes_[vslot].reset();
}

void Store::rename_volume(std::string_view old_name, std::string_view new_name) {
    std::unique_lock meta(meta_mu_);
    Volume& vol = volume_by_name(old_name);
    check_name(new_name);
    volume_slots_[vol.slot].name = std::string(new_name);
    persist_volume_slot(vol.slot);
    volume_names_.erase(vol.name);
    vol.name = std::string(new_name);
    volume_names_.emplace(vol.name, vol.slot);
}

SnapshotInfo Store::snapshot_volume_locked(Volume& vol) {
    std::vector<std::uint32_t> tslots;
    free_snapshot_slots(1, tslots);
    Snapshot& s = add_snapshot(vol.latest, vol.slot, tslots[0], logical_extents(vol.size));
    vol.latest = s.id;
    volume_slots_[vol.slot].latest_snapshot_id = s.id;
    persist_volume_slot(vol.slot);
    // The new latest snapshot is empty, so the resolved view does not change.
    return snapshot_info(s);
}

SnapshotInfo Store::create_snapshot(std::string_view volume) {
    std::unique_lock meta(meta_mu_);
    return snapshot_volume_locked(volume_by_name(volume));
}

void Store::delete_snapshot(std::string_view volume, SnapshotId id) {
    std::unique_lock meta(meta_mu_);
    Volume& vol = volume_by_name(volume);
    auto it = snapshots_.find(id);
    if (it == snapshots_.end() || it->second.volume_slot != vol.slot) {
        throw Error(Errc::not_found, fmt::format("snapshot {} not found in volume '{}'", id, volume));
    }
    if (id == vol.latest) {
        throw Error(Errc::conflict, fmt::format("snapshot {} is the top-level snapshot of '{}'", id, volume));
    }
    const auto kids = children_of(id);
    if (kids.size() != 1) {
        throw Error(Errc::conflict, fmt::format("snapshot {} is in use by {} child snapshots", id, kids.size()));
    }
    Snapshot& victim = it->second;
    Snapshot& child = snapshot(kids.front());

    const std::uint32_t bs = sb_.geometry.block_size;
    const std::uint32_t bpe = sb_.geometry.blocks_per_extent;
    const std::uint64_t per_block = bs / layout_.descriptor_size;
    std::set<std::uint64_t> dirty;
    std::vector<std::uint32_t> freed;

    for (std::uint64_t lext = 0; lext < victim.extents.size(); ++lext) {
        const std::uint32_t e = victim.extents[lext];
        if (e == kNoExtent) continue;
        const std::uint32_t c = child.extents[lext];
        if (c == kNoExtent) {
            // Nothing in the child shadows this extent: hand it over whole.
            descriptors_[e].owner = child.id;
            child.extents[lext] = e;
            dirty.insert(e / per_block);
        } else {
            const Bitmap& from = descriptors_[e].bitmap;
            Bitmap& into = descriptors_[c].bitmap;
            std::uint32_t b = 0;
            while (b < bpe) {
                if (!from.test(b) || into.test(b)) {
                    ++b;
                    continue;
                }
                std::uint32_t run = 1;
                while (b + run < bpe && from.test(b + run) && !into.test(b + run)) ++run;
                std::byte* buf = scratch(Scratch::data, std::size_t{run} * bs);
                read_data(data_position(e, b), {buf, std::size_t{run} * bs});
                write_data(data_position(c, b), {buf, std::size_t{run} * bs});
                for (std::uint32_t k = b; k < b + run; ++k) into.set(k);
                b += run;
            }
            dirty.insert(c / per_block);
            auto& d = descriptors_[e];
            d.owner = kNoSnapshot;
            d.logical_index = 0;
            d.bitmap.clear();
            dirty.insert(e / per_block);
            freed.push_back(e);
        }
        victim.extents[lext] = kNoExtent;
    }
    for (auto block : dirty) persist_descriptor_block_unlocked(block);
    for (auto p : freed) release_extent(p);

    child.parent = victim.parent;
    snapshot_slots_[child.table_slot].parent_id = victim.parent;
    persist_snapshot_slot(child.table_slot);
    snapshot_slots_[victim.table_slot] = SnapshotSlot{};
    persist_snapshot_slot(victim.table_slot);
    const SnapshotId child_id = child.id;
    snapshots_.erase(it);
    rebuild_views_containing(child_id);
}

VolumeInfo Store::clone_snapshot(std::string_view source_volume, SnapshotId id, std::string_view new_name) {
    std::unique_lock meta(meta_mu_);
    check_name(new_name);
    Volume& src = volume_by_name(source_volume);
    const auto chain = chain_of(src);
    if (std::find(chain.begin(), chain.end(), id) == chain.end()) {
        throw Error(Errc::not_found, fmt::format("snapshot {} not found in volume '{}'", id, source_volume));
    }
    const bool freeze_source = id == src.latest;
    const std::uint32_t vslot = free_volume_slot();
    std::vector<std::uint32_t> tslots;
    free_snapshot_slots(freeze_source ? 2 : 1, tslots);

    // A latest snapshot is still writable; freeze it so both volumes diverge by COW.
    if (freeze_source) snapshot_volume_locked(src);

    free_snapshot_slots(1, tslots);
    Snapshot& root = add_snapshot(id, vslot, tslots[0], logical_extents(src.size));
    volume_slots_[vslot] = VolumeSlot{true, root.id, src.size, std::string(new_name)};
    persist_volume_slot(vslot);

    auto vol = std::make_unique<Volume>();
    vol->slot = vslot;
    vol->name = std::string(new_name);
    vol->size = src.size;
    vol->latest = root.id;
    rebuild_view(*vol);
    volume_names_.emplace(vol->name, vslot);
    volumes_[vslot] = std::move(vol);
    return volume_info(*volumes_[vslot]);
}

// ---------------------------------------------------------------------------
// Reporting

SnapshotInfo Store::snapshot_info(const Snapshot& s) const {
    SnapshotInfo info;
    info.id = s.id;
    info.parent_id = s.parent;
    info.volume_slot = s.volume_slot;
    info.created_at = s.created_at;
    for (std::uint32_t p : s.extents) {
        if (p == kNoExtent) continue;
        ++info.owned_extents;
        info.written_blocks += descriptors_[p].bitmap.count();
    }
    return info;
}

VolumeInfo Store::volume_info(const Volume& vol) const {
    VolumeInfo info;
    info.slot = vol.slot;
    info.name = vol.name;
    info.size = vol.size;
    info.latest_snapshot_id = vol.latest;
    auto chain = chain_of(vol);
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
        const Snapshot& s = snapshots_.at(*it);
        info.chain.push_back(snapshot_info(s));
        if (s.volume_slot == vol.slot) info.owned_extents += info.chain.back().owned_extents;
    }
    return info;
}

DeviceReport Store::query() const {
    std::unique_lock meta(meta_mu_);
    DeviceReport r;
    r.geometry = sb_.geometry;
    r.layout = layout_;
    r.total_extents = layout_.extent_count;
    {
        std::lock_guard lk(alloc_mu_);
        r.allocation_mark = sb_.allocation_mark;
        r.next_snapshot_id = sb_.next_snapshot_id;
        r.free_extents = recycled_.size() + (layout_.extent_count - sb_.allocation_mark);
    }
    r.free_bytes = r.free_extents * sb_.geometry.extent_size();
    for (const auto& vol : volumes_) {
        if (vol) r.volumes.push_back(volume_info(*vol));
    }
    return r;
}

VolumeInfo Store::query(std::string_view volume) const {
    std::unique_lock meta(meta_mu_);
    return volume_info(volume_by_name(volume));
}

std::uint64_t Store::volume_size(std::string_view volume) const {
    std::shared_lock meta(meta_mu_);
    return volume_by_name(volume).size;
}

Superblock Store::superblock() const {
    std::lock_guard lk(alloc_mu_);
    return sb_;
}

ExtentIndexDump Store::dump_index() const {
    std::unique_lock meta(meta_mu_);
    ExtentIndexDump dump;
    for (const auto& [sid, s] : snapshots_) {
        auto& m = dump.snapshot_maps[sid];
        for (std::uint64_t lext = 0; lext < s.extents.size(); ++lext) {
            if (s.extents[lext] != kNoExtent) m[lext] = s.extents[lext];
        }
    }
    std::lock_guard lk(alloc_mu_);
    dump.allocation_mark = sb_.allocation_mark;
    dump.free_extents = recycled_;
    for (std::uint64_t i = sb_.allocation_mark; i < layout_.extent_count; ++i) {
        dump.free_extents.push_back(static_cast<std::uint32_t>(i));
    }
    std::sort(dump.free_extents.begin(), dump.free_extents.end());
    return dump;
}

StoreStats Store::stats() const noexcept {
    return {data_reads_.load(), data_writes_.load(), metadata_writes_.load(), file_.direct()};
}

}  // namespace minihorn::dbs
