#include "minihorn/replica/chained_file.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <cstring>
#include <optional>

#include <fmt/format.h>

#include "minihorn/error.hpp"
#include "minihorn/util/aligned_buffer.hpp"
#include "minihorn/util/bytes.hpp"

namespace minihorn::replica {

namespace {

constexpr std::array<char, 8> kFileMagic = {'C', 'H', 'N', 'F', 'I', 'L', 'E', '1'};
constexpr std::uint64_t kBitmapOffset = 32;
constexpr std::size_t kAlign = 4096;
constexpr const char* kMetaName = "volume.meta";

std::string layer_name(std::uint32_t id) { return fmt::format("snap-{}.dat", id); }

std::optional<std::uint32_t> parse_layer_name(const std::string& name) {
    if (!name.starts_with("snap-") || !name.ends_with(".dat")) return std::nullopt;
    std::uint32_t id = 0;
    const char* first = name.data() + 5;
    const char* last = name.data() + name.size() - 4;
    auto [p, ec] = std::from_chars(first, last, id);
    if (ec != std::errc{} || p != last || id == 0) return std::nullopt;
    return id;
}

void pwrite_all(int fd, std::uint64_t offset, const void* data, std::size_t n, const std::string& what) {
    auto* p = static_cast<const char*>(data);
    while (n > 0) {
        ssize_t w = ::pwrite(fd, p, n, static_cast<off_t>(offset));
        if (w < 0) {
            if (errno == EINTR) continue;
            throw_errno(what);
        }
        p += w;
        n -= static_cast<std::size_t>(w);
        offset += static_cast<std::uint64_t>(w);
    }
}

void pread_all(int fd, std::uint64_t offset, void* data, std::size_t n, const std::string& what) {
    auto* p = static_cast<char*>(data);
    while (n > 0) {
        ssize_t r = ::pread(fd, p, n, static_cast<off_t>(offset));
        if (r < 0) {
            if (errno == EINTR) continue;
            throw_errno(what);
        }
        if (r == 0) {
            std::memset(p, 0, n);
            return;
        }
        p += r;
        n -= static_cast<std::size_t>(r);
        offset += static_cast<std::uint64_t>(r);
    }
}

std::byte* scratch(std::size_t size) {
    thread_local AlignedBuffer buf;
    if (buf.size() < size) buf = AlignedBuffer(bytes::align_up(size, 64 * 1024), kAlign);
    return buf.data();
}

}  // namespace

ChainedFileStore::ChainedFileStore(std::filesystem::path dir, std::uint64_t size, std::uint32_t block_size,
                                   ChainedFileOptions options)
    : dir_(std::move(dir)), size_(size), block_size_(block_size), options_(options) {
    head_words_ = static_cast<std::size_t>((blocks() + 63) / 64);
    head_bits_ = std::make_unique<std::atomic<std::uint64_t>[]>(head_words_);
}

ChainedFileStore::~ChainedFileStore() {
    for (auto& l : layers_) {
        if (l->meta_fd >= 0) ::close(l->meta_fd);
    }
    if (meta_file_fd_ >= 0) ::close(meta_file_fd_);
}

std::uint64_t ChainedFileStore::header_size() const noexcept {
    return bytes::align_up(kBitmapOffset + bytes::div_ceil(blocks(), 8),
                           std::max<std::uint64_t>(kAlign, block_size_));
}

std::unique_ptr<ChainedFileStore::Layer> ChainedFileStore::make_layer(std::uint32_t id, bool create) {
    auto layer = std::make_unique<Layer>();
    layer->id = id;
    layer->path = dir_ / layer_name(id);
    if (create) {
        if (std::filesystem::exists(layer->path)) {
            throw Error(Errc::conflict, fmt::format("{} already exists", layer->path.string()));
        }
        layer->meta_fd = ::open(layer->path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
        if (layer->meta_fd < 0) throw_errno("create " + layer->path.string());
        std::vector<std::byte> hdr(kBitmapOffset);
        std::memcpy(hdr.data(), kFileMagic.data(), kFileMagic.size());
        bytes::store_le<std::uint32_t>(hdr.data() + 8, block_size_);
        bytes::store_le<std::uint64_t>(hdr.data() + 16, size_);
        bytes::store_le<std::uint32_t>(hdr.data() + 24, id);
        pwrite_all(layer->meta_fd, 0, hdr.data(), hdr.size(), "write header " + layer->path.string());
        if (::ftruncate(layer->meta_fd, static_cast<off_t>(header_size() + size_)) != 0) {
            throw_errno("truncate " + layer->path.string());
        }
    } else {
        layer->meta_fd = ::open(layer->path.c_str(), O_RDWR | O_CLOEXEC);
        if (layer->meta_fd < 0) throw_errno("open " + layer->path.string());
        std::vector<std::byte> hdr(kBitmapOffset);
        pread_all(layer->meta_fd, 0, hdr.data(), hdr.size(), "read header " + layer->path.string());
        if (std::memcmp(hdr.data(), kFileMagic.data(), kFileMagic.size()) != 0 ||
            bytes::load_le<std::uint32_t>(hdr.data() + 8) != block_size_ ||
            bytes::load_le<std::uint64_t>(hdr.data() + 16) != size_) {
            ::close(layer->meta_fd);
            throw Error(Errc::corrupt, fmt::format("{}: bad header", layer->path.string()));
        }
    }
    layer->data = DirectFile(layer->path, DirectFile::Mode::read_write, options_.direct_io);
    return layer;
}

std::unique_ptr<ChainedFileStore> ChainedFileStore::create(const std::filesystem::path& dir, std::uint64_t size,
                                                           std::uint32_t block_size, ChainedFileOptions options) {
    if (block_size < 512 || !bytes::is_pow2(block_size) || size == 0 || size % block_size != 0) {
        throw Error(Errc::invalid_argument, "size must be a positive multiple of a power-of-two block size");
    }
    std::filesystem::create_directories(dir);
    if (std::filesystem::exists(dir / kMetaName)) {
        throw Error(Errc::conflict, fmt::format("{} already holds a volume", dir.string()));
    }
    std::unique_ptr<ChainedFileStore> s(new ChainedFileStore(dir, size, block_size, options));
    s->layers_.push_back(s->make_layer(1, true));
    s->meta_file_fd_ = ::open((dir / kMetaName).c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (s->meta_file_fd_ < 0) throw_errno("create volume.meta");
    s->write_meta();
    return s;
}

std::unique_ptr<ChainedFileStore> ChainedFileStore::open(const std::filesystem::path& dir,
                                                         ChainedFileOptions options) {
    const auto meta_path = dir / kMetaName;
    int fd = ::open(meta_path.c_str(), O_RDWR | O_CLOEXEC);
    if (fd < 0) throw Error(Errc::not_found, fmt::format("{} not found", meta_path.string()));
    std::byte raw[4 + 256 + 8]{};
    pread_all(fd, 0, raw, sizeof raw, "read volume.meta");
    const auto len = bytes::load_le<std::uint32_t>(raw);
    if (len == 0 || len > 256) {
        ::close(fd);
        throw Error(Errc::corrupt, "volume.meta: bad head name");
    }
    std::string head(reinterpret_cast<const char*>(raw + 4), len);
    const std::uint64_t revision = bytes::load_le<std::uint64_t>(raw + 4 + len);

    std::vector<std::uint32_t> ids;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (auto id = parse_layer_name(entry.path().filename().string())) ids.push_back(*id);
    }
    std::sort(ids.begin(), ids.end());
    if (ids.empty() || layer_name(ids.back()) != head) {
        ::close(fd);
        throw Error(Errc::corrupt, fmt::format("{}: head {} is not the newest data file", dir.string(), head));
    }

    // Geometry comes from the head file header.
    std::byte hdr[kBitmapOffset]{};
    {
        int hfd = ::open((dir / head).c_str(), O_RDONLY | O_CLOEXEC);
        if (hfd < 0) {
            ::close(fd);
            throw_errno("open " + head);
        }
        pread_all(hfd, 0, hdr, sizeof hdr, "read header");
        ::close(hfd);
    }
    std::unique_ptr<ChainedFileStore> s(new ChainedFileStore(dir, bytes::load_le<std::uint64_t>(hdr + 16),
                                                             bytes::load_le<std::uint32_t>(hdr + 8), options));
    s->meta_file_fd_ = fd;
    s->revision_ = revision;
    for (auto id : ids) s->layers_.push_back(s->make_layer(id, false));
    s->load_head_bitmap();
    return s;
}

void ChainedFileStore::load_head_bitmap() {
    const std::size_t nbytes = static_cast<std::size_t>(bytes::div_ceil(blocks(), 8));
    std::vector<std::byte> raw(head_words_ * 8);
    pread_all(layers_.back()->meta_fd, kBitmapOffset, raw.data(), nbytes, "read bitmap");
    for (std::size_t w = 0; w < head_words_; ++w) head_bits_[w].store(bytes::load_le<std::uint64_t>(raw.data() + w * 8));
}

void ChainedFileStore::persist_head_bitmap(std::uint64_t first_block, std::uint64_t nblocks) {
    const std::uint64_t first_byte = first_block / 8;
    const std::uint64_t last_byte = (first_block + nblocks - 1) / 8;
    std::vector<std::byte> out(last_byte - first_byte + 1);
    std::lock_guard lk(bitmap_mu_);
    for (std::uint64_t b = first_byte; b <= last_byte; ++b) {
        const std::uint64_t word = head_bits_[b / 8].load(std::memory_order_relaxed);
        out[b - first_byte] = static_cast<std::byte>((word >> (8 * (b % 8))) & 0xff);
    }
    pwrite_all(layers_.back()->meta_fd, kBitmapOffset + first_byte, out.data(), out.size(), "write bitmap");
}

void ChainedFileStore::write_meta() {
    const std::string head = layer_name(layers_.back()->id);
    std::vector<std::byte> raw(4 + head.size() + 8);
    bytes::store_le<std::uint32_t>(raw.data(), static_cast<std::uint32_t>(head.size()));
    std::memcpy(raw.data() + 4, head.data(), head.size());
    bytes::store_le<std::uint64_t>(raw.data() + 4 + head.size(), revision_);
    pwrite_all(meta_file_fd_, 0, raw.data(), raw.size(), "write volume.meta");
    meta_writes_.fetch_add(1, std::memory_order_relaxed);
}

void ChainedFileStore::bump_revision() {
    std::lock_guard lk(meta_mu_);
    ++revision_;
    write_meta();
}

bool ChainedFileStore::head_has(std::uint64_t block) const noexcept {
    return (head_bits_[block / 64].load(std::memory_order_acquire) >> (block % 64)) & 1u;
}

int ChainedFileStore::locate(std::uint64_t block) {
    lookups_.fetch_add(1, std::memory_order_relaxed);
    if (head_has(block)) return static_cast<int>(layers_.size()) - 1;
    for (int i = static_cast<int>(layers_.size()) - 2; i >= 0; --i) {
        probes_.fetch_add(1, std::memory_order_relaxed);
        std::byte b{};
        pread_all(layers_[i]->meta_fd, kBitmapOffset + block / 8, &b, 1, "probe bitmap");
        if ((std::to_integer<unsigned>(b) >> (block % 8)) & 1u) return i;
    }
    return -1;
}

void ChainedFileStore::read(std::uint64_t offset, std::span<std::byte> out) {
    check_block_range(offset, out.size(), block_size_, size_);
    std::shared_lock chain(chain_mu_);
    const std::uint64_t first = offset / block_size_;
    const std::uint64_t n = out.size() / block_size_;
    std::vector<int> where(n);
    for (std::uint64_t i = 0; i < n; ++i) where[i] = locate(first + i);
    std::uint64_t i = 0;
    while (i < n) {
        std::uint64_t run = 1;
        while (i + run < n && where[i + run] == where[i]) ++run;
        auto dst = out.subspan(i * block_size_, run * block_size_);
        if (where[i] < 0) {
            std::memset(dst.data(), 0, dst.size());
        } else {
            const std::uint64_t pos = header_size() + (first + i) * block_size_;
            std::byte* buf = scratch(dst.size());
            layers_[where[i]]->data.pread_exact(pos, {buf, dst.size()});
            std::memcpy(dst.data(), buf, dst.size());
        }
        i += run;
    }
}

void ChainedFileStore::write(std::uint64_t offset, std::span<const std::byte> data) {
    check_block_range(offset, data.size(), block_size_, size_);
    if (data.empty()) return;
    std::shared_lock chain(chain_mu_);
    std::byte* buf = scratch(data.size());
    std::memcpy(buf, data.data(), data.size());
    layers_.back()->data.pwrite_exact(header_size() + offset, {buf, data.size()});
    const std::uint64_t first = offset / block_size_;
    const std::uint64_t n = data.size() / block_size_;
    for (std::uint64_t b = first; b < first + n; ++b) {
        head_bits_[b / 64].fetch_or(std::uint64_t{1} << (b % 64), std::memory_order_release);
    }
    persist_head_bitmap(first, n);
    if (options_.versioning) bump_revision();
}

void ChainedFileStore::unmap(std::uint64_t offset, std::uint64_t length) {
    check_block_range(offset, length, block_size_, size_);
    if (length == 0) return;
    std::shared_lock chain(chain_mu_);
    const std::uint64_t first = offset / block_size_;
    const std::uint64_t n = length / block_size_;
    for (std::uint64_t b = first; b < first + n; ++b) {
        head_bits_[b / 64].fetch_and(~(std::uint64_t{1} << (b % 64)), std::memory_order_release);
    }
    persist_head_bitmap(first, n);
    if (options_.versioning) bump_revision();
}

void ChainedFileStore::snapshot() {
    std::unique_lock chain(chain_mu_);
    layers_.push_back(make_layer(layers_.back()->id + 1, true));
    for (std::size_t w = 0; w < head_words_; ++w) head_bits_[w].store(0);
    std::lock_guard lk(meta_mu_);
    write_meta();
}

ChainedFileStats ChainedFileStore::stats() const {
    ChainedFileStats s;
    s.probes = probes_.load();
    s.block_lookups = lookups_.load();
    s.metadata_writes = meta_writes_.load();
    {
        std::lock_guard lk(meta_mu_);
        s.revision = revision_;
    }
    std::shared_lock chain(chain_mu_);
    s.chain_length = layers_.size();
    return s;
}

void ChainedFileStore::reset_counters() {
    probes_ = 0;
    lookups_ = 0;
    meta_writes_ = 0;
}

}  // namespace minihorn::replica
