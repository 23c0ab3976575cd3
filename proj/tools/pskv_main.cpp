// pskv: suffix-search inference lab driver.
//
//   pskv verify     [--config c] [--seed N] [--family N] [--precision f32|f64] [--inject-fault]
//   pskv attack     --config c [--strategy S] [--seed N] [--out P]
//   pskv bench      --config c [--widths 16,32,64] [--strategy S] [--seed N] [--out P]
//   pskv complexity --config c [--grid-np a,b,c] [--grid-ldec ...] [--grid-ncand ...]
//                   [--iterations E] [--b N] [--seed N] [--out P]
//
// Exit codes: 0 ok, 1 validation/invariant failure, 2 simulated OOM.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pskv/cli.hpp"
#include "pskv/report.hpp"

namespace {

pskv::Strategy parse_strategy_flag(const std::string& s) {
    if (s == "nocache") return pskv::Strategy::nocache;
    if (s == "standard") return pskv::Strategy::standard;
    if (s == "pskv") return pskv::Strategy::pskv;
    throw pskv::ConfigError("strategy", "must be one of nocache|standard|pskv");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"prefix-shared KV cache lab"};
    app.require_subcommand(1);

    std::string config_path;
    std::string strategy_flag;
    std::string out_flag;
    std::optional<std::uint64_t> seed_flag;

    // verify
    auto* verify = app.add_subcommand("verify", "run the equivalence suite");
    std::size_t family = 24;
    std::string precision_flag = "f32";
    bool inject_fault = false;
    verify->add_option("--config", config_path, "config file (only precision/seed are used)");
    verify->add_option("--seed", seed_flag, "override the family seed");
    verify->add_option("--family", family, "number of generated configs");
    verify->add_option("--precision", precision_flag, "f32 or f64");
    verify->add_flag("--inject-fault", inject_fault, "corrupt one cached value (suite must fail)");

    // attack
    auto* attack = app.add_subcommand("attack", "run the suffix search");
    attack->add_option("--config", config_path, "config file")->required();
    attack->add_option("--strategy", strategy_flag, "nocache|standard|pskv");
    attack->add_option("--seed", seed_flag, "override model+attack seed");
    attack->add_option("--out", out_flag, "report path (default: stdout)");

    // bench
    auto* bench = app.add_subcommand("bench", "width sweep with exact counters");
    std::vector<std::size_t> widths{16, 32, 64};
    bench->add_option("--config", config_path, "config file")->required();
    bench->add_option("--widths", widths, "candidate widths")->delimiter(',');
    bench->add_option("--strategy", strategy_flag, "restrict to one strategy");
    bench->add_option("--seed", seed_flag, "override model+attack seed");
    bench->add_option("--out", out_flag, "report path (default: stdout)");

    // complexity
    auto* complexity = app.add_subcommand("complexity", "validate the counting formulas");
    pskv::ComplexityGrid grid;
    complexity->add_option("--config", config_path, "config file")->required();
    complexity->add_option("--grid-np", grid.n_p, "prefix lengths")->delimiter(',');
    complexity->add_option("--grid-ldec", grid.l_dec, "decode lengths")->delimiter(',');
    complexity->add_option("--grid-ncand", grid.n_cand, "candidate counts")->delimiter(',');
    complexity->add_option("--iterations", grid.iterations, "evaluation rounds per point");
    complexity->add_option("--b", grid.b_prompts, "prompts per point");
    complexity->add_option("--seed", seed_flag, "override model+attack seed");
    complexity->add_option("--out", out_flag, "report path (default: stdout)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (verify->parsed()) {
            pskv::VerifyOptions options;
            options.n_configs = family;
            options.inject_fault = inject_fault;
            if (precision_flag == "f64") options.precision = pskv::Precision::f64;
            if (!config_path.empty()) {
                pskv::RunConfig cfg = pskv::parse_config(config_path);
                pskv::apply_seed_override(cfg, seed_flag);
                options.seed = cfg.model.seed;
                options.precision = cfg.model.precision;
            } else if (seed_flag) {
                options.seed = *seed_flag;
            }
            options.log = nullptr;
            return pskv::cmd_verify(options, std::cout);
        }

        pskv::RunConfig cfg = pskv::parse_config(config_path);
        pskv::apply_seed_override(cfg, seed_flag);
        if (!strategy_flag.empty()) cfg.strategy = parse_strategy_flag(strategy_flag);
        if (!out_flag.empty()) cfg.out = out_flag;

        if (attack->parsed()) return pskv::cmd_attack(cfg, std::cout);
        if (bench->parsed()) {
            std::vector<pskv::Strategy> strategies;
            if (!strategy_flag.empty()) strategies.push_back(parse_strategy_flag(strategy_flag));
            return pskv::cmd_bench(cfg, widths, std::cout, strategies);
        }
        if (complexity->parsed()) {
            grid.seed = cfg.attack.seed;
            return pskv::cmd_complexity(cfg, grid, std::cout);
        }
    } catch (const pskv::SimulatedOom& oom) {
        std::cerr << oom.what() << '\n';
        return pskv::kExitOom;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return pskv::kExitFailure;
    }
    return pskv::kExitFailure;
}
