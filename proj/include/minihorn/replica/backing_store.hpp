#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "minihorn/block_target.hpp"

namespace minihorn::dbs {
class Store;
}

namespace minihorn::replica {

/// Storage behind a replica. All implementations share the BlockTarget contract
/// and must accept concurrent block I/O.
class BackingStore : public BlockTarget {
public:
    virtual std::string describe() const = 0;
};

/// Acknowledges everything without touching media; reads return zeros.
class NullStore final : public BackingStore {
public:
    NullStore(std::uint64_t size, std::uint32_t block_size) : size_(size), block_size_(block_size) {}

    std::uint64_t size() const override { return size_; }
    std::uint32_t block_size() const override { return block_size_; }
    void read(std::uint64_t offset, std::span<std::byte> out) override;
    void write(std::uint64_t offset, std::span<const std::byte> data) override;
    void unmap(std::uint64_t offset, std::uint64_t length) override;
    bool completes_inline() const noexcept override { return true; }
    std::string describe() const override { return "null"; }

private:
    std::uint64_t size_;
    std::uint32_t block_size_;
};

/// One volume of a direct block store.
class DbsVolumeStore final : public BackingStore {
public:
    DbsVolumeStore(std::shared_ptr<dbs::Store> store, std::string volume);

    std::uint64_t size() const override { return size_; }
    std::uint32_t block_size() const override { return block_size_; }
    void read(std::uint64_t offset, std::span<std::byte> out) override;
    void write(std::uint64_t offset, std::span<const std::byte> data) override;
    void unmap(std::uint64_t offset, std::uint64_t length) override;
    std::string describe() const override;

    dbs::Store& store() noexcept { return *store_; }
    const std::string& volume() const noexcept { return volume_; }

private:
    std::shared_ptr<dbs::Store> store_;
    std::string volume_;
    std::uint64_t size_;
    std::uint32_t block_size_;
};

}  // namespace minihorn::replica
