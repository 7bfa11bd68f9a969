#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>

namespace minihorn {

struct IoCounters {
    std::uint64_t reads = 0;
    std::uint64_t writes = 0;
    std::uint64_t bytes_read = 0;
    std::uint64_t bytes_written = 0;
};

/// A file or raw block device opened for positional I/O, with O_DIRECT when the
/// underlying filesystem supports it. Callers supply buffers, offsets and sizes
/// aligned to the device block size when direct I/O is active.
class DirectFile {
public:
    enum class Mode { read_only, read_write, create };

    DirectFile() = default;
    DirectFile(const std::filesystem::path& path, Mode mode, bool direct);
    DirectFile(const DirectFile&) = delete;
    DirectFile& operator=(const DirectFile&) = delete;
    DirectFile(DirectFile&& o) noexcept;
    DirectFile& operator=(DirectFile&& o) noexcept;
    ~DirectFile();

    bool is_open() const noexcept { return fd_ >= 0; }
    bool direct() const noexcept { return direct_; }
    const std::filesystem::path& path() const noexcept { return path_; }

    /// Size in bytes; block devices report their capacity.
    std::uint64_t size() const;
    void truncate(std::uint64_t size);

    void pread_exact(std::uint64_t offset, std::span<std::byte> out) const;
    void pwrite_exact(std::uint64_t offset, std::span<const std::byte> data);
    void sync();

    IoCounters counters() const noexcept;
    void reset_counters() noexcept;

private:
    int fd_ = -1;
    bool direct_ = false;
    std::filesystem::path path_;
    mutable std::atomic<std::uint64_t> reads_{0};
    mutable std::atomic<std::uint64_t> bytes_read_{0};
    std::atomic<std::uint64_t> writes_{0};
    std::atomic<std::uint64_t> bytes_written_{0};
};

}  // namespace minihorn
