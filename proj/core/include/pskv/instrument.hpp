#pragma once

#include <atomic>
#include <cstdint>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pskv/errors.hpp"

namespace pskv {

// Attention-cell counter handle. One cell = one (query, key) pair actually
// scored. Order-independent integer accumulation, so concurrent workers may
// share one handle.
using CellCounter = std::atomic<std::uint64_t>;

struct Counters {
    std::atomic<std::uint64_t> attention_cells{0};
    std::atomic<std::uint64_t> prefix_forwards{0};
    std::atomic<std::uint64_t> candidate_token_passes{0};
    double wall_ms = 0.0;
};

// Plain copy of Counters for reports.
struct CountersSnapshot {
    std::uint64_t attention_cells = 0;
    std::uint64_t prefix_forwards = 0;
    std::uint64_t candidate_token_passes = 0;
    double wall_ms = 0.0;
};

inline CountersSnapshot snapshot(const Counters& c) {
    return {c.attention_cells.load(), c.prefix_forwards.load(),
            c.candidate_token_passes.load(), c.wall_ms};
}

class Accountant;

// RAII registration of one tracked allocation. Releasing (or destroying) the
// handle subtracts its bytes from the accountant's live total.
class TrackedAlloc {
  public:
    TrackedAlloc() = default;
    TrackedAlloc(const TrackedAlloc&) = delete;
    TrackedAlloc& operator=(const TrackedAlloc&) = delete;
    TrackedAlloc(TrackedAlloc&& other) noexcept { swap(other); }
    TrackedAlloc& operator=(TrackedAlloc&& other) noexcept {
        release();
        swap(other);
        return *this;
    }
    ~TrackedAlloc() { release(); }

    void release();
    std::uint64_t bytes() const { return bytes_; }
    const std::string& label() const { return label_; }

  private:
    friend class Accountant;
    TrackedAlloc(Accountant* acct, std::string label, std::uint64_t bytes)
        : acct_(acct), label_(std::move(label)), bytes_(bytes) {}
    void swap(TrackedAlloc& other) noexcept {
        std::swap(acct_, other.acct_);
        std::swap(label_, other.label_);
        std::swap(bytes_, other.bytes_);
    }

    Accountant* acct_ = nullptr;
    std::string label_;
    std::uint64_t bytes_ = 0;
};

// Byte accountant for cache and grid state. Tracks logical bytes (what the
// data structures hold), not allocator behavior, so peaks are reproducible on
// any machine. An optional budget turns excess allocation into SimulatedOom.
class Accountant {
  public:
    struct LogEntry {
        std::string label;
        std::int64_t delta;  // +bytes on allocation, -bytes on release
    };

    Accountant() = default;
    explicit Accountant(std::uint64_t budget_bytes) : budget_(budget_bytes) {}

    void set_budget(std::optional<std::uint64_t> budget) {
        std::lock_guard<std::mutex> lock(mu_);
        budget_ = budget;
    }

    [[nodiscard]] TrackedAlloc track(std::string label, std::uint64_t bytes);

    std::uint64_t live_bytes() const {
        std::lock_guard<std::mutex> lock(mu_);
        return live_;
    }
    std::uint64_t peak_bytes() const {
        std::lock_guard<std::mutex> lock(mu_);
        return peak_;
    }
    // Live bytes currently held under a given label.
    std::uint64_t live_bytes_labeled(std::string_view label) const;
    std::vector<LogEntry> log() const {
        std::lock_guard<std::mutex> lock(mu_);
        return log_;
    }

  private:
    friend class TrackedAlloc;
    void release(const std::string& label, std::uint64_t bytes);

    mutable std::mutex mu_;
    std::uint64_t live_ = 0;
    std::uint64_t peak_ = 0;
    std::optional<std::uint64_t> budget_;
    std::vector<LogEntry> log_;
};

// Convenience for call sites where tracking is optional.
inline TrackedAlloc maybe_track(Accountant* acct, std::string label, std::uint64_t bytes) {
    if (!acct) return {};
    return acct->track(std::move(label), bytes);
}

}  // namespace pskv
