#include "minihorn/util/direct_file.hpp"

#include <fcntl.h>
#include <linux/fs.h>
#include <sys/ioctl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>

#include "minihorn/error.hpp"

namespace minihorn {

DirectFile::DirectFile(const std::filesystem::path& path, Mode mode, bool direct) : path_(path) {
    int flags = O_CLOEXEC;
    switch (mode) {
        case Mode::read_only: flags |= O_RDONLY; break;
        case Mode::read_write: flags |= O_RDWR; break;
        case Mode::create: flags |= O_RDWR | O_CREAT; break;
    }
    if (direct) {
        fd_ = ::open(path.c_str(), flags | O_DIRECT, 0644);
        // tmpfs and some overlay setups reject O_DIRECT; fall back to buffered I/O there.
        if (fd_ >= 0) {
            direct_ = true;
            return;
        }
        if (errno != EINVAL) throw_errno("open " + path.string());
    }
    fd_ = ::open(path.c_str(), flags, 0644);
    if (fd_ < 0) throw_errno("open " + path.string());
}

DirectFile::DirectFile(DirectFile&& o) noexcept { *this = std::move(o); }

DirectFile& DirectFile::operator=(DirectFile&& o) noexcept {
    if (this != &o) {
        if (fd_ >= 0) ::close(fd_);
        fd_ = std::exchange(o.fd_, -1);
        direct_ = o.direct_;
        path_ = std::move(o.path_);
        reads_ = o.reads_.load();
        bytes_read_ = o.bytes_read_.load();
        writes_ = o.writes_.load();
        bytes_written_ = o.bytes_written_.load();
    }
    return *this;
}

DirectFile::~DirectFile() {
    if (fd_ >= 0) ::close(fd_);
}

std::uint64_t DirectFile::size() const {
    struct stat st {};
    if (::fstat(fd_, &st) != 0) throw_errno("fstat " + path_.string());
    if (S_ISBLK(st.st_mode)) {
        std::uint64_t bytes = 0;
        if (::ioctl(fd_, BLKGETSIZE64, &bytes) != 0) throw_errno("BLKGETSIZE64 " + path_.string());
        return bytes;
    }
    return static_cast<std::uint64_t>(st.st_size);
}

void DirectFile::truncate(std::uint64_t size) {
    if (::ftruncate(fd_, static_cast<off_t>(size)) != 0) throw_errno("ftruncate " + path_.string());
}

void DirectFile::pread_exact(std::uint64_t offset, std::span<std::byte> out) const {
    std::size_t done = 0;
    while (done < out.size()) {
        ssize_t n = ::pread(fd_, out.data() + done, out.size() - done, static_cast<off_t>(offset + done));
        if (n < 0) {
            if (errno == EINTR) continue;
            throw_errno("pread " + path_.string());
        }
        if (n == 0) {
            // Reads past EOF of a sparse image are holes.
            std::fill(out.begin() + static_cast<std::ptrdiff_t>(done), out.end(), std::byte{0});
            break;
        }
        done += static_cast<std::size_t>(n);
    }
    reads_.fetch_add(1, std::memory_order_relaxed);
    bytes_read_.fetch_add(out.size(), std::memory_order_relaxed);
}

void DirectFile::pwrite_exact(std::uint64_t offset, std::span<const std::byte> data) {
    std::size_t done = 0;
    while (done < data.size()) {
        ssize_t n = ::pwrite(fd_, data.data() + done, data.size() - done, static_cast<off_t>(offset + done));
        if (n < 0) {
            if (errno == EINTR) continue;
            throw_errno("pwrite " + path_.string());
        }
        done += static_cast<std::size_t>(n);
    }
    writes_.fetch_add(1, std::memory_order_relaxed);
    bytes_written_.fetch_add(data.size(), std::memory_order_relaxed);
}

void DirectFile::sync() {
    if (::fdatasync(fd_) != 0) throw_errno("fdatasync " + path_.string());
}

IoCounters DirectFile::counters() const noexcept {
    return {reads_.load(), writes_.load(), bytes_read_.load(), bytes_written_.load()};
}

void DirectFile::reset_counters() noexcept {
    reads_ = 0;
    writes_ = 0;
    bytes_read_ = 0;
    bytes_written_ = 0;
}

}  // namespace minihorn
