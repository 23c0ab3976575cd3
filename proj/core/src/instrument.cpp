#include "pskv/instrument.hpp"

namespace pskv {

TrackedAlloc Accountant::track(std::string label, std::uint64_t bytes) {
    std::lock_guard<std::mutex> lock(mu_);
    if (budget_ && live_ + bytes > *budget_) {
        throw SimulatedOom(label, bytes, live_, *budget_);
    }
    live_ += bytes;
    if (live_ > peak_) peak_ = live_;
    log_.push_back({label, static_cast<std::int64_t>(bytes)});
    return TrackedAlloc(this, std::move(label), bytes);
}

void Accountant::release(const std::string& label, std::uint64_t bytes) {
    std::lock_guard<std::mutex> lock(mu_);
    live_ -= bytes;
    log_.push_back({label, -static_cast<std::int64_t>(bytes)});
}

std::uint64_t Accountant::live_bytes_labeled(std::string_view label) const {
    std::lock_guard<std::mutex> lock(mu_);
    std::int64_t sum = 0;
    for (const auto& entry : log_) {
        if (entry.label == label) sum += entry.delta;
    }
    return static_cast<std::uint64_t>(sum);
}

void TrackedAlloc::release() {
    if (acct_) {
        acct_->release(label_, bytes_);
        acct_ = nullptr;
        bytes_ = 0;
        label_.clear();
    }
}

}  // namespace pskv
