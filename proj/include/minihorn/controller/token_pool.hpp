#pragma once

#include <condition_variable>
#include <cstdint>
#include <mutex>
#include <optional>
#include <vector>

namespace minihorn::controller {

/// Blocking FIFO of request ids 0..capacity-1. acquire() waits while the pool is
/// empty; close() releases every waiter with nullopt.
class TokenPool {
public:
    explicit TokenPool(std::uint32_t capacity) : ring_(capacity), count_(capacity) {
        for (std::uint32_t i = 0; i < capacity; ++i) ring_[i] = i;
    }

    std::optional<std::uint32_t> acquire() {
        std::unique_lock lk(mu_);
        cv_.wait(lk, [this] { return count_ > 0 || closed_; });
        if (closed_) return std::nullopt;
        return pop();
    }

    std::optional<std::uint32_t> try_acquire() {
        std::lock_guard lk(mu_);
        if (closed_ || count_ == 0) return std::nullopt;
        return pop();
    }

    void release(std::uint32_t id) {
        {
            std::lock_guard lk(mu_);
            ring_[(head_ + count_) % ring_.size()] = id;
            ++count_;
        }
        cv_.notify_one();
    }

    void close() {
        {
            std::lock_guard lk(mu_);
            closed_ = true;
        }
        cv_.notify_all();
    }

    std::uint32_t capacity() const noexcept { return static_cast<std::uint32_t>(ring_.size()); }
    std::uint32_t available() const {
        std::lock_guard lk(mu_);
        return count_;
    }

private:
    std::uint32_t pop() {
        const std::uint32_t id = ring_[head_];
        head_ = (head_ + 1) % ring_.size();
        --count_;
        return id;
    }

    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::vector<std::uint32_t> ring_;
    std::size_t head_ = 0;
    std::uint32_t count_;
    bool closed_ = false;
};

}  // namespace minihorn::controller
