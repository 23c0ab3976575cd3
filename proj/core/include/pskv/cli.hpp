#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "pskv/bench.hpp"
#include "pskv/config.hpp"
#include "pskv/verify.hpp"

namespace pskv {

// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // invariant or validation failure
inline constexpr int kExitOom = 2;      // simulated OOM under a byte budget

// Seed precedence: --seed flag, then PSKV_SEED, then the config file.
// The winning seed replaces both the model and the attack seed.
void apply_seed_override(RunConfig& cfg, std::optional<std::uint64_t> cli_seed);

int cmd_verify(const VerifyOptions& options, std::ostream& out);
int cmd_attack(const RunConfig& cfg, std::ostream& out);
// Sweeps widths x strategies; pass a non-empty strategy list to restrict.
int cmd_bench(const RunConfig& cfg, const std::vector<std::size_t>& widths, std::ostream& out,
              const std::vector<Strategy>& strategies = {});
int cmd_complexity(const RunConfig& cfg, const ComplexityGrid& grid, std::ostream& out);

}  // namespace pskv
