#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pskv/attack.hpp"
#include "pskv/types.hpp"

namespace pskv {

enum class ReportFormat { json, csv };

inline const char* to_string(ReportFormat f) { return f == ReportFormat::json ? "json" : "csv"; }

struct DataConfig {
    std::vector<TokenSeq> prompts;
    std::vector<TokenSeq> targets;
};

struct RunConfig {
    ModelConfig model;
    AttackConfig attack;
    DataConfig data;
    Strategy strategy = Strategy::pskv;
    std::optional<std::uint64_t> budget_bytes;
    std::string out;
    ReportFormat format = ReportFormat::json;

    void validate() const;
};

// Strict JSON config: defaults applied, unknown keys rejected, constraint
// violations reported with the offending field name.
RunConfig parse_config(const std::string& path);
RunConfig parse_config_text(const std::string& text);

// The fully-defaulted configuration as canonical JSON; re-parsing it yields
// the same config (and the same emitted string).
std::string effective_config_json(const RunConfig& cfg);

}  // namespace pskv
