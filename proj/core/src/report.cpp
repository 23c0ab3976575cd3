#include "pskv/report.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace pskv {

using nlohmann::json;

namespace {

// %.17g round-trips doubles exactly, so equal losses print as equal bytes.
std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

json counters_json(const CountersSnapshot& c) {
    return {{"attention_cells", c.attention_cells},
            {"prefix_forwards", c.prefix_forwards},
            {"candidate_token_passes", c.candidate_token_passes},
            {"wall_ms", c.wall_ms}};
}

}  // namespace

std::string attack_report_json(const AttackReport& rep, const RunConfig& cfg) {
    json root;
    root["strategy"] = to_string(rep.strategy);
    root["algo"] = to_string(rep.algo);
    root["iterations_run"] = rep.iterations_run;
    root["best_loss_curve"] = rep.best_loss_curve;
    root["final_suffix"] = rep.final_suffix;
    root["final_loss"] = rep.final_loss;
    json success = json::array();
    for (const auto s : rep.success) success.push_back(s != 0);
    root["success"] = success;
    root["mean_token_nll"] = rep.mean_token_nll;
    root["counters"] = counters_json(rep.counters);
    root["peak_bytes"] = rep.peak_bytes;
    root["prefix_bytes"] = rep.prefix_bytes;
    root["wall_ms"] = rep.wall_ms;
    root["oom"] = rep.oom;
    if (rep.oom) root["oom_detail"] = rep.oom_detail;
    root["config"] = json::parse(effective_config_json(cfg));
    return root.dump(2);
}

std::string attack_report_csv(const AttackReport& rep) {
    std::ostringstream out;
    out << "prompt,iteration,best_loss\n";
    for (std::size_t b = 0; b < rep.best_loss_curve.size(); ++b) {
        for (std::size_t i = 0; i < rep.best_loss_curve[b].size(); ++i) {
            out << b << ',' << i << ',' << fmt_double(rep.best_loss_curve[b][i]) << '\n';
        }
    }
    return out.str();
}

std::string bench_rows_csv(const std::vector<BenchRow>& rows) {
    std::ostringstream out;
    out << kBenchCsvHeader << '\n';
    for (const auto& r : rows) {
        out << to_string(r.strategy) << ',' << to_string(r.algo) << ',' << r.width << ','
            << r.b_prompts << ',' << r.n_p << ',' << r.l_dec << ',' << r.iterations << ','
            << r.cells_measured << ',' << r.cells_predicted << ',' << r.peak_bytes << ','
            << r.prefix_bytes << ',' << fmt_double(r.wall_ms) << ',' << (r.oom ? 1 : 0) << '\n';
    }
    return out.str();
}

std::string bench_rows_json(const std::vector<BenchRow>& rows, const RunConfig& cfg) {
    json arr = json::array();
    for (const auto& r : rows) {
        arr.push_back({{"strategy", to_string(r.strategy)},
                       {"algo", to_string(r.algo)},
                       {"width", r.width},
                       {"B", r.b_prompts},
                       {"N_p", r.n_p},
                       {"L_dec", r.l_dec},
                       {"E", r.iterations},
                       {"cells_measured", r.cells_measured},
                       {"cells_predicted", r.cells_predicted},
                       {"peak_bytes", r.peak_bytes},
                       {"prefix_bytes", r.prefix_bytes},
                       {"wall_ms", r.wall_ms},
                       {"oom", r.oom}});
    }
    json root;
    root["rows"] = arr;
    const std::size_t b = cfg.data.prompts.size();
    std::size_t np_max = 0, nt_max = 0;
    for (const auto& p : cfg.data.prompts) np_max = std::max(np_max, p.ids.size());
    for (const auto& t : cfg.data.targets) nt_max = std::max(nt_max, t.ids.size());
    const std::size_t l_dec = cfg.attack.suffix_len + nt_max;
    std::size_t width_max = 0;
    for (const auto& r : rows) width_max = std::max(width_max, r.width);
    root["overhead_allowance_bytes"] =
        bench_overhead_allowance(cfg.model, b, b * width_max, np_max, l_dec);
    root["config"] = json::parse(effective_config_json(cfg));
    return root.dump(2);
}

std::string complexity_report_json(const ComplexityReport& rep) {
    json arr = json::array();
    for (const auto& p : rep.points) {
        arr.push_back({{"strategy", to_string(p.strategy)},
                       {"N_p", p.n_p},
                       {"L_dec", p.l_dec},
                       {"N_cand", p.n_cand},
                       {"measured", p.measured},
                       {"predicted", p.predicted},
                       {"exact", p.exact}});
    }
    json root;
    root["points"] = arr;
    root["all_exact"] = rep.all_exact;
    root["r2_nocache"] = rep.r2_nocache;
    root["r2_cached"] = rep.r2_cached;
    if (!rep.first_mismatch.empty()) root["first_mismatch"] = rep.first_mismatch;
    return root.dump(2);
}

std::string complexity_report_csv(const ComplexityReport& rep) {
    std::ostringstream out;
    out << "strategy,N_p,L_dec,N_cand,measured,predicted,exact\n";
    for (const auto& p : rep.points) {
        out << to_string(p.strategy) << ',' << p.n_p << ',' << p.l_dec << ',' << p.n_cand << ','
            << p.measured << ',' << p.predicted << ',' << (p.exact ? 1 : 0) << '\n';
    }
    return out.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot open output file: " + path, 0);
    out << text;
}

}  // namespace pskv
