#pragma once

#include <string>
#include <vector>

#include "pskv/attack.hpp"
#include "pskv/bench.hpp"
#include "pskv/config.hpp"

namespace pskv {

// Attack report, reproducible from (config, seed) except wall_ms.
std::string attack_report_json(const AttackReport& rep, const RunConfig& cfg);
// CSV view: one row per (prompt, iteration) of the best-loss curve.
std::string attack_report_csv(const AttackReport& rep);

inline constexpr const char* kBenchCsvHeader =
    "strategy,algo,width,B,N_p,L_dec,E,cells_measured,cells_predicted,peak_bytes,prefix_bytes,"
    "wall_ms,oom";

std::string bench_rows_csv(const std::vector<BenchRow>& rows);
std::string bench_rows_json(const std::vector<BenchRow>& rows, const RunConfig& cfg);

std::string complexity_report_json(const ComplexityReport& rep);
std::string complexity_report_csv(const ComplexityReport& rep);

void write_text_file(const std::string& path, const std::string& text);

}  // namespace pskv
