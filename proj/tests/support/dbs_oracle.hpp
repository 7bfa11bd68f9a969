#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "dbs_model.hpp"
#include "minihorn/dbs/store.hpp"
#include "minihorn/error.hpp"
#include "pattern.hpp"

namespace minihorn::testing {

struct OracleConfig {
    std::uint32_t max_volumes = 8;
    std::uint64_t volume_size = 64ull << 20;
    std::uint32_t max_chain = 100;
    std::uint32_t max_io_blocks = 16;
    double invalid_rate = 0.05;
    // Extra chance per step of a snapshot instead of the usual mix; grows chains.
    double snapshot_bias = 0.0;
};

struct OracleStats {
    std::uint64_t ops = 0;
    std::uint64_t reads = 0;
    std::uint64_t blocks_checked = 0;
    std::uint64_t mismatches = 0;
    std::uint64_t expected_errors = 0;
    std::map<std::string, std::uint64_t> by_kind;
    std::string first_failure;
};

/// Drives identical random operation sequences into a Store and a DbsModel and
/// compares every read and every error outcome.
class DbsOracle {
public:
    DbsOracle(dbs::Store& store, DbsModel& model, std::uint64_t seed, OracleConfig config = {})
        : store_(&store), model_(&model), rng_(seed), cfg_(config), bs_(store.geometry().block_size) {}

    void rebind(dbs::Store& store) { store_ = &store; }
    OracleConfig& config() { return cfg_; }
    const OracleStats& stats() const noexcept { return stats_; }

    void run(std::uint64_t ops) {
        for (std::uint64_t i = 0; i < ops && stats_.mismatches == 0; ++i) step();
    }

    void step() {
        ++stats_.ops;
        const auto& vols = model_->volumes();
        if (vols.empty()) return do_create();
        if (cfg_.snapshot_bias > 0 && std::bernoulli_distribution(cfg_.snapshot_bias)(rng_)) return do_snapshot();
        std::uniform_int_distribution<int> pick(0, 999);
        int r = pick(rng_);
        if (r < 330) return do_write();
        if (r < 660) return do_read();
        if (r < 740) return do_unmap();
        if (r < 820) return do_snapshot();
        if (r < 890) return do_delete_snapshot();
        if (r < 925) return do_clone();
        if (r < 955) return do_create();
        if (r < 980) return do_delete_volume();
        return do_rename();
    }

    /// Reads every volume end to end and compares each block with the model.
    void verify_all() {
        std::vector<std::byte> buf(1u << 20);
        for (const auto& [name, v] : model_->volumes()) {
            for (std::uint64_t off = 0; off < v.size; off += buf.size()) {
                const auto n = static_cast<std::size_t>(std::min<std::uint64_t>(buf.size(), v.size - off));
                store_->read(name, off, std::span<std::byte>(buf).first(n));
                compare(name, off, std::span<const std::byte>(buf).first(n), "full image");
            }
        }
    }

private:
    bool invalid() { return std::bernoulli_distribution(cfg_.invalid_rate)(rng_); }

    std::string random_volume() {
        const auto& vols = model_->volumes();
        auto it = vols.begin();
        std::advance(it, std::uniform_int_distribution<std::size_t>(0, vols.size() - 1)(rng_));
        return it->first;
    }

    std::string fresh_name() {
        for (;;) {
            auto name = fmt::format("vol{}", std::uniform_int_distribution<int>(0, 31)(rng_));
            if (!model_->volumes().contains(name)) return name;
        }
    }

    std::pair<std::uint64_t, std::uint64_t> random_range(std::uint64_t size) {
        const std::uint64_t blocks = size / bs_;
        std::uint64_t n = std::uniform_int_distribution<std::uint64_t>(1, cfg_.max_io_blocks)(rng_);
        std::uint64_t first = std::uniform_int_distribution<std::uint64_t>(0, blocks - n)(rng_);
        if (invalid()) {
            // Unaligned or past the end.
            if (rng_() & 1) return {first * bs_ + 512, n * bs_};
            return {size - bs_, 2 * bs_};
        }
        return {first * bs_, n * bs_};
    }

    template <typename F>
    void expect(const char* kind, DbsModel::Result predicted, F&& action) {
        ++stats_.by_kind[kind];
        std::optional<Errc> actual;
        try {
            action();
        } catch (const Error& e) {
            actual = e.code();
            if (!predicted) fail(fmt::format("{}: unexpected error '{}'", kind, e.what()));
        }
        if (predicted && !actual) fail(fmt::format("{}: expected {} but succeeded", kind, to_string(*predicted)));
        if (predicted && actual && *predicted != *actual) {
            fail(fmt::format("{}: expected {} got {}", kind, to_string(*predicted), to_string(*actual)));
        }
        if (predicted && actual) ++stats_.expected_errors;
    }

    void fail(const std::string& what) {
        if (stats_.mismatches++ == 0) stats_.first_failure = fmt::format("op {}: {}", stats_.ops, what);
    }

    void compare(const std::string& name, std::uint64_t offset, std::span<const std::byte> data, const char* kind) {
        std::vector<std::byte> expect(bs_);
        for (std::size_t i = 0; i < data.size(); i += bs_) {
            const std::uint64_t block = (offset + i) / bs_;
            fill_block(expect, model_->tag_at(name, block));
            ++stats_.blocks_checked;
            if (std::memcmp(expect.data(), data.data() + i, bs_) != 0) {
                fail(fmt::format("{}: volume {} block {} differs", kind, name, block));
                return;
            }
        }
    }

    void do_create() {
        std::string name = invalid() && !model_->volumes().empty() ? random_volume() : fresh_name();
        if (model_->volumes().size() >= cfg_.max_volumes && !invalid()) return do_write_or_skip();
        auto predicted = model_->create_volume(name, cfg_.volume_size);
        expect("create_volume", predicted, [&] { store_->create_volume(name, cfg_.volume_size); });
    }

    void do_write_or_skip() {
        if (!model_->volumes().empty()) do_write();
    }

    void do_write() {
        auto name = random_volume();
        auto [off, len] = random_range(model_->volumes().at(name).size);
        const std::uint64_t tag = next_tag_;
        next_tag_ += len / bs_ + 1;
        std::vector<std::byte> data(len);
        for (std::uint64_t i = 0; i * bs_ < len; ++i) {
            fill_block(std::span<std::byte>(data).subspan(i * bs_, std::min<std::uint64_t>(bs_, len - i * bs_)),
                       tag + i);
        }
        auto predicted = model_->write(name, off, len, tag);
        expect("write", predicted, [&] { store_->write(name, off, data); });
    }

    void do_read() {
        auto name = random_volume();
        auto [off, len] = random_range(model_->volumes().at(name).size);
        std::vector<std::byte> data(len);
        auto predicted = model_->check_read(name, off, len);
        bool ok = false;
        expect("read", predicted, [&] {
            store_->read(name, off, data);
            ok = true;
        });
        if (ok && !predicted) {
            ++stats_.reads;
            compare(name, off, data, "read");
        }
    }

    void do_unmap() {
        auto name = random_volume();
        auto [off, len] = random_range(model_->volumes().at(name).size);
        auto predicted = model_->unmap(name, off, len);
        expect("unmap", predicted, [&] { store_->unmap(name, off, len); });
    }

    void do_snapshot() {
        auto name = random_volume();
        if (model_->chain_of(name).size() >= cfg_.max_chain) return do_delete_snapshot(name);
        const auto expected_id = model_->next_id();
        auto predicted = model_->create_snapshot(name);
        expect("create_snapshot", predicted, [&] {
            auto info = store_->create_snapshot(name);
            if (info.id != expected_id) fail(fmt::format("snapshot id {} expected {}", info.id, expected_id));
        });
    }

    void do_delete_snapshot() { do_delete_snapshot(random_volume()); }

    void do_delete_snapshot(const std::string& name) {
        auto own = model_->own_chain(name);
        DbsModel::Id target;
        if (own.size() < 2 || invalid()) {
            target = invalid() ? 999999 : own.front();  // unknown id, or the top-level guard
        } else {
            target = own[std::uniform_int_distribution<std::size_t>(1, own.size() - 1)(rng_)];
        }
        auto predicted = model_->delete_snapshot(name, target);
        expect("delete_snapshot", predicted, [&] { store_->delete_snapshot(name, target); });
    }

    void do_clone() {
        auto src = random_volume();
        auto chain = model_->chain_of(src);
        auto id = chain[std::uniform_int_distribution<std::size_t>(0, chain.size() - 1)(rng_)];
        std::string name = invalid() ? src : fresh_name();
        if (model_->volumes().size() >= cfg_.max_volumes && !invalid()) return do_read();
        auto predicted = model_->clone_snapshot(src, id, name);
        expect("clone_snapshot", predicted, [&] { store_->clone_snapshot(src, id, name); });
    }

    void do_delete_volume() {
        std::string name = invalid() ? fresh_name() : random_volume();
        auto predicted = model_->delete_volume(name);
        expect("delete_volume", predicted, [&] { store_->delete_volume(name); });
    }

    void do_rename() {
        auto from = random_volume();
        std::string to = invalid() ? random_volume() : fresh_name();
        auto predicted = model_->rename_volume(from, to);
        expect("rename_volume", predicted, [&] { store_->rename_volume(from, to); });
    }

    dbs::Store* store_;
    DbsModel* model_;
    std::mt19937_64 rng_;
    OracleConfig cfg_;
    std::uint32_t bs_;
    std::uint64_t next_tag_ = 1;
    OracleStats stats_;
};

}  // namespace minihorn::testing
