#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "pskv/types.hpp"

namespace pskv {

struct VerifyOptions {
    std::uint64_t seed = 20260809;
    std::size_t n_configs = 24;
    Precision precision = Precision::f32;
    // Test hook: corrupt one cached prefix value per config; the suite must
    // then report failures, proving it can actually see a broken cache.
    bool inject_fault = false;
    std::ostream* log = nullptr;
};

struct VerifyResult {
    std::size_t configs_run = 0;
    std::size_t checks_run = 0;
    std::size_t failures = 0;
    std::vector<std::string> failure_lines;
    double wall_ms = 0.0;
};

// The equivalence suite: over a seeded family of model/batch configurations,
// checks strategy bit-identity (losses and logits), padding neutrality
// against per-row unpadded references, cache-split invariance, and exact
// attention-cell counts.
VerifyResult run_verify(const VerifyOptions& options);

}  // namespace pskv
