// Acceptance suite: one line per criterion, nonzero exit if any fails.
// Every tolerance is pinned here in code; counted quantities are exact.

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pskv/cli.hpp"
#include "pskv/report.hpp"
#include "pskv/verify.hpp"

using namespace pskv;
using nlohmann::json;

namespace {

int g_failures = 0;

void criterion(int number, const std::string& name, const std::function<std::string()>& body) {
    std::string detail;
    bool ok = true;
    try {
        detail = body();
    } catch (const std::exception& e) {
        ok = false;
        detail = std::string("exception: ") + e.what();
    }
    if (!detail.empty() && detail.rfind("FAIL:", 0) == 0) ok = false;
    std::printf("[%s] criterion %d: %s%s%s\n", ok ? "PASS" : "FAIL", number, name.c_str(),
                detail.empty() ? "" : " -- ", detail.c_str());
    if (!ok) ++g_failures;
}

ModelConfig lab_model(std::uint64_t seed, std::size_t layers = 1, std::size_t q_heads = 2,
                      std::size_t kv_heads = 2, std::size_t d_head = 8,
                      std::size_t vocab = 31) {
    ModelConfig cfg;
    cfg.n_layers = layers;
    cfg.n_q_heads = q_heads;
    cfg.n_kv_heads = kv_heads;
    cfg.d_head = d_head;
    cfg.d_model = q_heads * d_head;
    cfg.vocab_size = vocab;
    cfg.seed = seed;
    return cfg;
}

std::vector<TokenSeq> uniform_seqs(std::size_t count, std::size_t len, Role role,
                                   std::uint64_t seed, std::size_t vocab) {
    Rng rng(seed);
    std::vector<TokenSeq> out(count);
    for (auto& s : out) {
        s.role = role;
        s.ids.resize(len);
        for (auto& id : s.ids) id = static_cast<std::int32_t>(rng.bounded(vocab - 1));
    }
    return out;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Max live bytes ever held under one label, replayed from the allocation log.
std::uint64_t max_live_labeled(const Accountant& acct, const std::string& label) {
    std::int64_t live = 0, peak = 0;
    for (const auto& entry : acct.log()) {
        if (entry.label != label) continue;
        live += entry.delta;
        peak = std::max(peak, live);
    }
    return static_cast<std::uint64_t>(peak);
}

// One instrumented teacher-forced evaluation, tracked into acct.
template <typename T>
void instrumented_eval(const Weights<T>& w, Strategy strategy,
                       const std::vector<TokenSeq>& prompts,
                       const std::vector<TokenSeq>& targets, std::size_t suffix_len,
                       std::size_t width, Accountant& acct) {
    Counters counters;
    AlignedBatch base =
        align_batch(prompts, targets, suffix_len, w.config.pad_id(), 3, &acct);
    std::optional<PrefixCache<T>> shared, expanded;
    StrategyContext<T> ctx;
    ctx.strategy = strategy;
    if (strategy != Strategy::nocache) {
        shared.emplace(build_prefix_cache(w, prompts, &acct, base.prefix_cols, &counters));
        if (strategy == Strategy::standard) {
            expanded.emplace(expand_standard(*shared, width, &acct));
            shared.reset();
            ctx.prefix = &*expanded;
            ctx.expanded = true;
        } else {
            ctx.prefix = &*shared;
        }
    }
    Mat<std::int32_t> suffixes(prompts.size() * width, suffix_len);
    Rng rng(3);
    for (auto& x : suffixes.data)
        x = static_cast<std::int32_t>(rng.bounded(w.config.vocab_size - 1));
    AlignedBatch batch = write_suffix_candidates(base, suffixes, &acct);
    evaluate_candidates(w, batch, ctx, &acct, &counters);
}

std::string attack_config_json(Strategy strategy, std::size_t iterations,
                               const std::vector<std::int32_t>& prompt,
                               const std::vector<std::int32_t>& target, std::size_t suffix_len,
                               const std::string& out) {
    json cfg;
    cfg["model"] = {{"seed", 404},     {"n_layers", 1},   {"d_model", 16}, {"n_q_heads", 2},
                    {"n_kv_heads", 2}, {"d_head", 8},     {"vocab_size", 61}};
    cfg["attack"] = {{"iterations", iterations},
                     {"survivors", 2},
                     {"proposals_per_survivor", 4},
                     {"suffix_len", suffix_len},
                     {"init_token", 5},
                     {"seed", 2024}};
    cfg["data"] = {{"prompt_tokens", json::array({prompt})},
                   {"target_tokens", json::array({target})}};
    cfg["strategy"] = to_string(strategy);
    cfg["out"] = out;
    return cfg.dump();
}

}  // namespace

int main() {
    criterion(1, "equivalence suite: bit-identical strategies and padding neutrality", [] {
        VerifyOptions options;
        options.n_configs = 24;
        const VerifyResult result = run_verify(options);
        std::ostringstream os;
        os << result.configs_run << " configs, " << result.checks_run << " checks, "
           << result.failures << " failures, " << result.wall_ms / 1000.0 << " s";
        if (result.failures != 0) return "FAIL: " + os.str();
        if (result.configs_run < 20) return "FAIL: family smaller than 20 -- " + os.str();
        if (result.wall_ms >= 60000.0) return "FAIL: over 60 s -- " + os.str();
        return os.str();
    });

    criterion(2, "exact attention-cell counts (teacher-forced grid and beam)", [] {
        const auto w = init_model<float>(lab_model(1001));
        ComplexityGrid grid;
        grid.n_p = {4, 8, 16};
        grid.l_dec = {4, 8, 12};
        grid.n_cand = {1, 4, 8};
        grid.iterations = 2;
        const ComplexityReport report = verify_complexity(w, grid);
        if (!report.all_exact) return "FAIL: grid mismatch at " + report.first_mismatch;

        // cached strategies predict and measure identically
        for (const auto& p : report.points) {
            if (p.strategy == Strategy::nocache) continue;
            const auto other = predicted_cells(
                p.strategy == Strategy::pskv ? Strategy::standard : Strategy::pskv,
                grid.iterations, p.n_cand, p.n_p, p.l_dec, 1);
            if (p.predicted != other) return std::string("FAIL: cached predictions differ");
        }

        // beam mode: incremental counts, all three strategies
        const auto prompts = uniform_seqs(1, 8, Role::prefix, 5, 31);
        const auto targets = uniform_seqs(1, 5, Role::target, 6, 31);
        AttackConfig acfg;
        acfg.algo = Algo::beam;
        acfg.beam_k1 = 3;
        acfg.beam_k2 = 2;
        acfg.iterations = 5;
        acfg.suffix_len = 6;
        acfg.init_token = 5;
        for (const Strategy s : {Strategy::nocache, Strategy::standard, Strategy::pskv}) {
            const auto rep = run_attack(w, prompts, targets, acfg, s);
            const auto predicted = predicted_cells_beam(s, 5, 3, 2, 8, 5, 1);
            if (rep.counters.attention_cells != predicted) {
                return "FAIL: beam " + std::string(to_string(s)) + " measured " +
                       std::to_string(rep.counters.attention_cells) + " != predicted " +
                       std::to_string(predicted);
            }
        }
        return std::string("81 grid points exact, beam incremental exact for all strategies");
    });

    criterion(3, "memory formulas exact; standard/pskv cache ratio 2.86 +/- 0.05", [] {
        // headline operating point: N_cand=64, N_p=78, L_dec=40 (N_s=20, N_t=20), B=1
        const auto cfg = lab_model(1002);
        const auto w = init_model<float>(cfg);
        const auto prompts = uniform_seqs(1, 78, Role::prefix, 7, cfg.vocab_size);
        const auto targets = uniform_seqs(1, 20, Role::target, 8, cfg.vocab_size);

        Accountant std_acct, pskv_acct;
        instrumented_eval(w, Strategy::standard, prompts, targets, 20, 64, std_acct);
        instrumented_eval(w, Strategy::pskv, prompts, targets, 20, 64, pskv_acct);

        const std::uint64_t std_prefix = max_live_labeled(std_acct, "prefix_cache_expanded");
        const std::uint64_t pskv_prefix = max_live_labeled(pskv_acct, "prefix_cache");
        if (std_prefix != cache_bytes(cfg, 64, 78))
            return std::string("FAIL: standard prefix bytes off the formula");
        if (pskv_prefix != cache_bytes(cfg, 1, 78))
            return std::string("FAIL: pskv prefix bytes off the formula");
        if (max_live_labeled(pskv_acct, "pskv_layer_view") != 0)
            return std::string("FAIL: pskv materialized prefix copies");

        const std::uint64_t std_cand = max_live_labeled(std_acct, "candidate_cache");
        const std::uint64_t pskv_cand = max_live_labeled(pskv_acct, "candidate_cache");
        if (std_cand != cache_bytes(cfg, 64, 40) || pskv_cand != std_cand)
            return std::string("FAIL: candidate cache bytes off the formula");

        const double ratio = static_cast<double>(std_prefix + std_cand) /
                             static_cast<double>(pskv_prefix + pskv_cand);
        std::ostringstream os;
        os << "measured total-cache ratio " << ratio;
        if (std::abs(ratio - 2.86) > 0.05) return "FAIL: " + os.str();
        return os.str();
    });

    criterion(4, "width sweep: pskv prefix constant, standard doubles, budget OOMs standard", [] {
        const auto cfg = lab_model(1003);
        const auto w = init_model<float>(cfg);
        BenchScenario sc;
        sc.prompts = uniform_seqs(1, 24, Role::prefix, 9, cfg.vocab_size);
        sc.targets = uniform_seqs(1, 8, Role::target, 10, cfg.vocab_size);
        sc.suffix_len = 8;
        sc.init_token = 5;
        sc.iterations = 2;
        sc.widths = {16, 32, 64};
        sc.strategies = {Strategy::standard, Strategy::pskv};
        sc.seed = 77;

        const auto rows = run_benchmark(w, sc);
        if (rows[3].prefix_bytes != rows[4].prefix_bytes ||
            rows[4].prefix_bytes != rows[5].prefix_bytes)
            return std::string("FAIL: pskv prefix bytes vary with width");
        if (rows[1].prefix_bytes != 2 * rows[0].prefix_bytes ||
            rows[2].prefix_bytes != 2 * rows[1].prefix_bytes)
            return std::string("FAIL: standard prefix bytes do not double per step");

        // a budget strictly between the two peaks at width 64
        const std::uint64_t budget = (rows[2].peak_bytes + rows[5].peak_bytes) / 2;
        BenchScenario budgeted = sc;
        budgeted.widths = {64};
        budgeted.budget = budget;
        const auto rows2 = run_benchmark(w, budgeted);
        if (!rows2[0].oom) return std::string("FAIL: standard did not OOM under the budget");
        if (rows2[1].oom) return std::string("FAIL: pskv OOMed under the budget");
        std::ostringstream os;
        os << "standard prefix " << rows[0].prefix_bytes << "->" << rows[2].prefix_bytes
           << " bytes, pskv constant " << rows[3].prefix_bytes << " bytes, budget " << budget
           << " OOMs standard only";
        return os.str();
    });

    criterion(5, "attack trajectories bit-identical; monotone; planted target succeeds", [] {
        const std::vector<std::int32_t> prompt{3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8};
        const std::vector<std::int32_t> target{2, 7, 1, 8, 2, 8};
        std::ostringstream sink;

        std::vector<std::string> curves, suffixes;
        for (const Strategy s : {Strategy::nocache, Strategy::standard, Strategy::pskv}) {
            const std::string out = std::string("acc_attack_") + to_string(s) + ".json";
            const std::string cfg_path = out + ".cfg";
            std::ofstream(cfg_path) << attack_config_json(s, 50, prompt, target, 8, out);
            const int rc = cmd_attack(parse_config(cfg_path), sink);
            if (rc != kExitOk) return std::string("FAIL: attack exited nonzero");
            const json rep = json::parse(slurp(out));
            curves.push_back(rep.at("best_loss_curve").dump());
            suffixes.push_back(rep.at("final_suffix").dump());
            const auto curve = rep.at("best_loss_curve").at(0).get<std::vector<double>>();
            if (curve.size() != 51) return std::string("FAIL: curve length != E+1");
            for (std::size_t i = 1; i < curve.size(); ++i) {
                if (curve[i] > curve[i - 1]) return std::string("FAIL: best loss increased");
            }
            std::remove(out.c_str());
            std::remove(cfg_path.c_str());
        }
        if (curves[0] != curves[1] || curves[0] != curves[2])
            return std::string("FAIL: best-loss curves differ across strategies");
        if (suffixes[0] != suffixes[1] || suffixes[0] != suffixes[2])
            return std::string("FAIL: final suffixes differ across strategies");

        // planted-target fixture: target = greedy continuation of prompt+init suffix
        const auto cfg = lab_model(404, 1, 2, 2, 8, 61);
        const auto w = init_model<float>(cfg);
        std::vector<std::int32_t> seed_ids = prompt;
        seed_ids.insert(seed_ids.end(), 8, 5);  // the initial suffix: 8 x init_token 5
        std::vector<std::int32_t> planted;
        {
            std::vector<std::int32_t> ids = seed_ids;
            for (int step = 0; step < 5; ++step) {
                const auto logits = forward_full(w, std::span<const std::int32_t>(ids));
                const float* row = logits.row(logits.rows - 1);
                std::size_t best = 0;
                for (std::size_t j = 1; j < logits.cols; ++j)
                    if (row[j] > row[best]) best = j;
                planted.push_back(static_cast<std::int32_t>(best));
                ids.push_back(static_cast<std::int32_t>(best));
            }
        }
        const std::string out = "acc_attack_planted.json";
        std::ofstream("acc_planted.cfg")
            << attack_config_json(Strategy::pskv, 0, prompt, planted, 8, out);
        if (cmd_attack(parse_config("acc_planted.cfg"), sink) != kExitOk)
            return std::string("FAIL: planted attack exited nonzero");
        const json rep = json::parse(slurp(out));
        std::remove(out.c_str());
        std::remove("acc_planted.cfg");
        if (!rep.at("success").at(0).get<bool>())
            return std::string("FAIL: planted target not reported as success");
        return std::string("3 strategies byte-identical over E=50, monotone, planted success");
    });

    criterion(6, "directional timing: pskv faster than nocache at width 64 (>=9/10)", [] {
        ModelConfig cfg;  // default toy model (2 layers, d_model 32)
        cfg.seed = 1006;
        cfg.vocab_size = 61;
        const auto w = init_model<float>(cfg);
        BenchScenario sc;
        sc.prompts = uniform_seqs(1, 78, Role::prefix, 11, cfg.vocab_size);
        sc.targets = uniform_seqs(1, 16, Role::target, 12, cfg.vocab_size);
        sc.suffix_len = 20;
        sc.init_token = 5;
        sc.iterations = 2;
        sc.widths = {64};
        sc.strategies = {Strategy::nocache, Strategy::pskv};
        int pskv_wins = 0;
        for (int rep = 0; rep < 10; ++rep) {
            sc.seed = 100 + rep;
            const auto rows = run_benchmark(w, sc);
            if (rows[1].wall_ms < rows[0].wall_ms) ++pskv_wins;
        }
        std::ostringstream os;
        os << "pskv faster in " << pskv_wins << "/10 runs";
        if (pskv_wins < 9) return "FAIL: " + os.str();
        return os.str();
    });

    criterion(7, "GQA byte model: 4x fewer kv heads = exactly 4x fewer cache bytes", [] {
        const auto mha_cfg = lab_model(1007, 2, 8, 8, 8, 31);
        auto gqa_cfg = mha_cfg;
        gqa_cfg.n_kv_heads = 2;
        const auto prompts = uniform_seqs(2, 14, Role::prefix, 13, 31);
        const auto targets = uniform_seqs(2, 6, Role::target, 14, 31);

        std::uint64_t prefix_mha = 0, prefix_gqa = 0, cand_mha = 0, cand_gqa = 0;
        for (int which = 0; which < 2; ++which) {
            const auto& cfg = which == 0 ? mha_cfg : gqa_cfg;
            const auto w = init_model<float>(cfg);
            Accountant acct;
            instrumented_eval(w, Strategy::pskv, prompts, targets, 6, 8, acct);
            (which == 0 ? prefix_mha : prefix_gqa) = max_live_labeled(acct, "prefix_cache");
            (which == 0 ? cand_mha : cand_gqa) = max_live_labeled(acct, "candidate_cache");
        }
        if (prefix_mha != 4 * prefix_gqa) return std::string("FAIL: prefix bytes not 4x");
        if (cand_mha != 4 * cand_gqa) return std::string("FAIL: candidate bytes not 4x");
        for (const Strategy s : {Strategy::standard, Strategy::nocache, Strategy::pskv}) {
            if (predicted_cache_bytes(s, mha_cfg, 2, 16, 14, 12) !=
                4 * predicted_cache_bytes(s, gqa_cfg, 2, 16, 14, 12))
                return std::string("FAIL: predicted bytes not 4x");
        }

        // equivalence still holds on the GQA config
        const auto w = init_model<float>(gqa_cfg);
        AlignedBatch base = align_batch(prompts, targets, 6, gqa_cfg.pad_id(), 3);
        Mat<std::int32_t> suffixes(8, 6);
        Rng rng(15);
        for (auto& x : suffixes.data)
            x = static_cast<std::int32_t>(rng.bounded(gqa_cfg.vocab_size - 1));
        AlignedBatch batch = write_suffix_candidates(base, suffixes);
        StrategyContext<float> no{Strategy::nocache, nullptr, false};
        const auto l_no = evaluate_candidates(w, batch, no, nullptr, nullptr);
        auto cache = build_prefix_cache(w, prompts, nullptr, base.prefix_cols);
        StrategyContext<float> pk{Strategy::pskv, &cache, false};
        const auto l_pskv = evaluate_candidates(w, batch, pk, nullptr, nullptr);
        if (std::memcmp(l_no.data(), l_pskv.data(), l_no.size() * sizeof(double)) != 0)
            return std::string("FAIL: GQA losses differ across strategies");
        return std::string("prefix and candidate bytes shrink exactly 4x, equivalence holds");
    });

    if (g_failures == 0) {
        std::printf("acceptance: all criteria passed\n");
    } else {
        std::printf("acceptance: %d criteria FAILED\n", g_failures);
    }
    return g_failures == 0 ? 0 : 1;
}
