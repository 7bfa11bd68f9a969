#include "minihorn/replica/backing_store.hpp"

#include <cstring>

#include <fmt/format.h>

#include "minihorn/dbs/store.hpp"

namespace minihorn::replica {

void NullStore::read(std::uint64_t offset, std::span<std::byte> out) {
    check_block_range(offset, out.size(), block_size_, size_);
    std::memset(out.data(), 0, out.size());
}

void NullStore::write(std::uint64_t offset, std::span<const std::byte> data) {
    check_block_range(offset, data.size(), block_size_, size_);
}

void NullStore::unmap(std::uint64_t offset, std::uint64_t length) {
    check_block_range(offset, length, block_size_, size_);
}

DbsVolumeStore::DbsVolumeStore(std::shared_ptr<dbs::Store> store, std::string volume)
    : store_(std::move(store)),
      volume_(std::move(volume)),
      size_(store_->volume_size(volume_)),
      block_size_(store_->geometry().block_size) {}

void DbsVolumeStore::read(std::uint64_t offset, std::span<std::byte> out) { store_->read(volume_, offset, out); }

void DbsVolumeStore::write(std::uint64_t offset, std::span<const std::byte> data) {
    store_->write(volume_, offset, data);
}

void DbsVolumeStore::unmap(std::uint64_t offset, std::uint64_t length) { store_->unmap(volume_, offset, length); }

std::string DbsVolumeStore::describe() const { return fmt::format("dbs:{}", volume_); }

}  // namespace minihorn::replica
