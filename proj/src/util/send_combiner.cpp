#include "minihorn/util/send_combiner.hpp"

#include <cstring>

#include "minihorn/error.hpp"

namespace minihorn::net {

bool BufferedReader::read_exact(std::span<std::byte> out) {
    std::size_t done = 0;
    while (done < out.size()) {
        if (head_ == tail_) {
            const std::size_t want = out.size() - done;
            if (want >= buf_.size()) {
                // Large bodies go straight into the destination.
                if (!sock_.recv_exact(out.subspan(done))) {
                    if (done == 0) return false;
                    throw Error(Errc::io, "connection closed mid-message");
                }
                return true;
            }
            head_ = tail_ = 0;
            const std::size_t n = sock_.recv_some(buf_);
            if (n == 0) {
                if (done == 0) return false;
                throw Error(Errc::io, "connection closed mid-message");
            }
            tail_ = n;
        }
        const std::size_t n = std::min(tail_ - head_, out.size() - done);
        std::memcpy(out.data() + done, buf_.data() + head_, n);
        head_ += n;
        done += n;
    }
    return true;
}

void SendCombiner::mark_sent(OutMessage& m) {
    if (!m.sent) return;
    m.sent->fetch_or(1, std::memory_order_release);
    m.sent->notify_all();
}

bool SendCombiner::failed() const {
    std::lock_guard lk(mu_);
    return failed_;
}

bool SendCombiner::post(OutMessage&& m) {
    std::unique_lock lk(mu_);
    if (failed_) {
        mark_sent(m);
        return false;
    }
    queue_.push_back(std::move(m));
    if (sending_) return true;
    sending_ = true;
    std::vector<OutMessage> batch;
    std::vector<iovec> iov;
    while (!queue_.empty() && !failed_) {
        batch.swap(queue_);
        lk.unlock();
        iov.clear();
        for (auto& b : batch) {
            iov.push_back({b.head.data(), b.head_len});
            const std::span<const std::byte> body = b.owned.empty() ? b.body : std::span<const std::byte>(b.owned);
            if (!body.empty()) iov.push_back({const_cast<std::byte*>(body.data()), body.size()});
        }
        bool ok = true;
        try {
            sock_.send_all(iov);
        } catch (const Error&) {
            ok = false;
        }
        for (auto& b : batch) mark_sent(b);
        batch.clear();
        lk.lock();
        if (!ok) failed_ = true;
    }
    for (auto& q : queue_) mark_sent(q);
    queue_.clear();
    sending_ = false;
    return !failed_;
}

}  // namespace minihorn::net
