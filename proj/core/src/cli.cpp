#include "pskv/cli.hpp"

#include <cstdlib>
#include <ostream>

#include "pskv/report.hpp"

namespace pskv {

namespace {

std::optional<std::uint64_t> env_seed() {
    const char* value = std::getenv("PSKV_SEED");
    if (!value || !*value) return std::nullopt;
    char* end = nullptr;
    const unsigned long long parsed = std::strtoull(value, &end, 10);
    if (end == value || *end != '\0') throw ConfigError("PSKV_SEED", "not an integer");
    return static_cast<std::uint64_t>(parsed);
}

void emit(const RunConfig& cfg, const std::string& text, std::ostream& out) {
    if (cfg.out.empty()) {
        out << text;
        if (!text.empty() && text.back() != '\n') out << '\n';
    } else {
        write_text_file(cfg.out, text);
    }
}

template <typename T>
int attack_with(const RunConfig& cfg, std::ostream& out) {
    const Weights<T> w = init_model<T>(cfg.model);
    const AttackReport rep =
        run_attack(w, cfg.data.prompts, cfg.data.targets, cfg.attack, cfg.strategy,
                   cfg.budget_bytes);
    const std::string text = cfg.format == ReportFormat::csv ? attack_report_csv(rep)
                                                             : attack_report_json(rep, cfg);
    emit(cfg, text, out);
    return rep.oom ? kExitOom : kExitOk;
}

template <typename T>
int bench_with(const RunConfig& cfg, const std::vector<std::size_t>& widths, std::ostream& out,
               const std::vector<Strategy>& strategies) {
    const Weights<T> w = init_model<T>(cfg.model);
    BenchScenario sc;
    sc.prompts = cfg.data.prompts;
    sc.targets = cfg.data.targets;
    sc.suffix_len = cfg.attack.suffix_len;
    sc.init_token = cfg.attack.init_token;
    sc.iterations = cfg.attack.iterations;
    sc.widths = widths;
    if (!strategies.empty()) sc.strategies = strategies;
    sc.algo = cfg.attack.algo;
    sc.beam_k1 = cfg.attack.algo == Algo::beam ? cfg.attack.beam_k1 : 0;
    sc.seed = cfg.attack.seed;
    sc.budget = cfg.budget_bytes;
    const auto rows = run_benchmark(w, sc);
    const std::string text =
        cfg.format == ReportFormat::csv ? bench_rows_csv(rows) : bench_rows_json(rows, cfg);
    emit(cfg, text, out);
    return kExitOk;
}

template <typename T>
int complexity_with(const RunConfig& cfg, const ComplexityGrid& grid, std::ostream& out) {
    const Weights<T> w = init_model<T>(cfg.model);
    const ComplexityReport rep = verify_complexity(w, grid);
    const std::string text = cfg.format == ReportFormat::csv ? complexity_report_csv(rep)
                                                             : complexity_report_json(rep);
    emit(cfg, text, out);
    if (!rep.all_exact) {
        out << "complexity mismatch: " << rep.first_mismatch << '\n';
        return kExitFailure;
    }
    if (rep.r2_nocache < 0.999 || rep.r2_cached < 0.999) {
        out << "asymptotic fit below 0.999: r2_nocache=" << rep.r2_nocache
            << " r2_cached=" << rep.r2_cached << '\n';
        return kExitFailure;
    }
    return kExitOk;
}

}  // namespace

void apply_seed_override(RunConfig& cfg, std::optional<std::uint64_t> cli_seed) {
    std::optional<std::uint64_t> seed = cli_seed;
    if (!seed) seed = env_seed();
    if (seed) {
        cfg.model.seed = *seed;
        cfg.attack.seed = *seed;
    }
}

int cmd_verify(const VerifyOptions& options, std::ostream& out) {
    const VerifyResult result = run_verify(options);
    for (const auto& line : result.failure_lines) out << line << '\n';
    out << "verify: " << result.configs_run << " configs, " << result.checks_run << " checks, "
        << result.failures << " failures, precision=" << to_string(options.precision)
        << (result.failures == 0 ? ", strategies bit-identical" : "") << ", "
        << result.wall_ms << " ms\n";
    return result.failures == 0 ? kExitOk : kExitFailure;
}

int cmd_attack(const RunConfig& cfg, std::ostream& out) {
    if (cfg.model.precision == Precision::f64) return attack_with<double>(cfg, out);
    return attack_with<float>(cfg, out);
}

int cmd_bench(const RunConfig& cfg, const std::vector<std::size_t>& widths, std::ostream& out,
              const std::vector<Strategy>& strategies) {
    if (widths.empty()) throw ConfigError("widths", "at least one width required");
    if (cfg.model.precision == Precision::f64)
        return bench_with<double>(cfg, widths, out, strategies);
    return bench_with<float>(cfg, widths, out, strategies);
}

int cmd_complexity(const RunConfig& cfg, const ComplexityGrid& grid, std::ostream& out) {
    if (cfg.model.precision == Precision::f64) return complexity_with<double>(cfg, grid, out);
    return complexity_with<float>(cfg, grid, out);
}

}  // namespace pskv
