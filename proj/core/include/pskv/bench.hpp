#pragma once

// Instrumentation validation: closed-form predictors for attention cells and
// cache bytes, plus the sweep drivers that check measured counters against
// them. Cell counts are exact -- no tolerances anywhere in this module.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "pskv/attack.hpp"
#include "pskv/types.hpp"

namespace pskv {

// Causal pair count over L tokens: L*(L+1)/2.
inline std::uint64_t tri(std::uint64_t n) { return n * (n + 1) / 2; }

// Attention cells for one candidate evaluated once.
inline std::uint64_t cells_per_candidate(Strategy strategy, std::uint64_t n_p,
                                         std::uint64_t l_dec) {
    if (strategy == Strategy::nocache) return tri(n_p + l_dec);
    return n_p * l_dec + tri(l_dec);
}

// Exact cells for E teacher-forced evaluation rounds of N_cand candidates.
// Cached strategies pay the prefix pass once (B rows); nocache recomputes
// everything every round. Standard and pskv predictions are identical.
inline std::uint64_t predicted_cells(Strategy strategy, std::uint64_t iterations,
                                     std::uint64_t n_cand, std::uint64_t n_p, std::uint64_t l_dec,
                                     std::uint64_t b_prompts) {
    if (strategy == Strategy::nocache) {
        return iterations * n_cand * tri(n_p + l_dec);
    }
    return b_prompts * tri(n_p) + iterations * n_cand * (n_p * l_dec + tri(l_dec));
}

// Ragged generalization: per-candidate (n_p, l_dec) lengths for one round,
// per-prompt prefix lengths for the one-time pass.
struct RowLengths {
    std::uint64_t n_p = 0;
    std::uint64_t l_dec = 0;
};

inline std::uint64_t predicted_cells_rows(Strategy strategy, std::uint64_t iterations,
                                          std::span<const RowLengths> rows,
                                          std::span<const std::uint64_t> prompt_prefix_lens) {
    std::uint64_t per_round = 0;
    for (const auto& r : rows) per_round += cells_per_candidate(strategy, r.n_p, r.l_dec);
    if (strategy == Strategy::nocache) return iterations * per_round;
    std::uint64_t prefix = 0;
    for (const auto np : prompt_prefix_lens) prefix += tri(np);
    return prefix + iterations * per_round;
}

// Incremental predictor for beam decoding: appending one token with history
// h costs h+1 cells; scoring a child replays the target band against its
// history. Mirrors the beam loop exactly, including the iteration-0 scoring
// of the empty suffix.
inline std::uint64_t predicted_cells_beam(Strategy strategy, std::uint64_t steps,
                                          std::uint64_t k1, std::uint64_t k2, std::uint64_t n_p,
                                          std::uint64_t n_t, std::uint64_t b_prompts) {
    std::uint64_t total = 0;
    if (strategy == Strategy::nocache) {
        total += b_prompts * tri(n_p + n_t - 1);  // iteration-0 full pass
    } else {
        total += b_prompts * tri(n_p);  // prefix pass
        if (n_t >= 2) total += b_prompts * ((n_t - 1) * (n_p + 1) + tri(n_t - 2));
    }
    std::uint64_t parents = 1;
    for (std::uint64_t s = 0; s < steps; ++s) {
        const std::uint64_t children = parents * k1;
        if (strategy == Strategy::nocache) {
            total += b_prompts * children * tri(n_p + s + n_t);
        } else {
            total += b_prompts * children * (n_t * (n_p + s + 1) + tri(n_t - 1));
        }
        parents = std::min(k2, children);
    }
    return total;
}

// Peak cache-byte model per strategy (grid and transient overheads excluded;
// run_benchmark bounds those separately).
inline std::uint64_t predicted_cache_bytes(Strategy strategy, const ModelConfig& cfg,
                                           std::uint64_t b_prompts, std::uint64_t n_cand,
                                           std::uint64_t n_p_max, std::uint64_t l_dec) {
    switch (strategy) {
        case Strategy::nocache:
            return cache_bytes(cfg, n_cand, n_p_max + l_dec);
        case Strategy::standard:
            return cache_bytes(cfg, n_cand, n_p_max) + cache_bytes(cfg, n_cand, l_dec);
        default:
            return cache_bytes(cfg, b_prompts, n_p_max) + cache_bytes(cfg, n_cand, l_dec);
    }
}

struct BenchRow {
    Strategy strategy = Strategy::pskv;
    Algo algo = Algo::random_substitution;
    std::size_t width = 0;  // K*q per prompt (random substitution) or beam width
    std::size_t b_prompts = 0;
    std::size_t n_p = 0;
    std::size_t l_dec = 0;
    std::size_t iterations = 0;
    std::uint64_t cells_measured = 0;
    std::uint64_t cells_predicted = 0;
    std::uint64_t peak_bytes = 0;
    std::uint64_t prefix_bytes = 0;
    double wall_ms = 0.0;
    bool oom = false;
};

struct BenchScenario {
    std::vector<TokenSeq> prompts;
    std::vector<TokenSeq> targets;
    std::size_t suffix_len = 20;
    std::int32_t init_token = 33;
    std::size_t iterations = 3;  // evaluation rounds per cell
    std::vector<std::size_t> widths{16, 32, 64};
    std::vector<Strategy> strategies{Strategy::nocache, Strategy::standard, Strategy::pskv};
    Algo algo = Algo::random_substitution;
    std::size_t beam_k1 = 0;  // 0: use the cell width for both beam parameters
    std::uint64_t seed = 1;
    std::optional<std::uint64_t> budget;
    // Cells run sequentially by default so wall times are comparable; the
    // parallel mode keeps the exact-count checks but makes wall_ms unusable
    // for cross-cell comparison.
    bool parallel_cells = false;
};

// Fixed per-run overhead the peak check allows on top of the cache-byte
// model: the token grids (base + expanded candidate grid) and, for the
// standard strategy, the shared B-row cache that exists while the expanded
// copy is being filled.
inline std::uint64_t bench_overhead_allowance(const ModelConfig& cfg, std::uint64_t b_prompts,
                                              std::uint64_t n_cand, std::uint64_t n_p_max,
                                              std::uint64_t l_dec) {
    const std::uint64_t width_cols = n_p_max + l_dec;
    return grid_bytes(b_prompts, width_cols) + grid_bytes(n_cand, width_cols) +
           cache_bytes(cfg, b_prompts, n_p_max);
}

namespace detail {

// Teacher-forced benchmark cell: E rounds of width proposals per prompt,
// counted and accounted. Returns the filled row; throws on an exact-count or
// peak-bound violation, records (not throws) simulated OOM.
template <typename T>
BenchRow bench_cell_random(const Weights<T>& w, const BenchScenario& sc, Strategy strategy,
                           std::size_t width) {
    const ModelConfig& cfg = w.config;
    const std::size_t b_prompts = sc.prompts.size();
    BenchRow row;
    row.strategy = strategy;
    row.algo = Algo::random_substitution;
    row.width = width;
    row.b_prompts = b_prompts;
    row.iterations = sc.iterations;

    Accountant acct;
    if (sc.budget) acct.set_budget(*sc.budget);
    Counters counters;
    Rng rng(sc.seed);
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<RowLengths> lens;
    std::vector<std::uint64_t> prefix_lens;
    try {
        AlignedBatch base = align_batch(sc.prompts, sc.targets, sc.suffix_len, cfg.pad_id(),
                                        sc.init_token, &acct);
        row.n_p = base.prefix_cols;
        row.l_dec = base.suffix_len + base.target_cols;
        for (std::size_t b = 0; b < b_prompts; ++b) {
            prefix_lens.push_back(static_cast<std::uint64_t>(base.prefix_len[b]));
            for (std::size_t j = 0; j < width; ++j) {
                lens.push_back({static_cast<std::uint64_t>(base.prefix_len[b]),
                                sc.suffix_len + static_cast<std::uint64_t>(base.target_len[b])});
            }
        }

        std::optional<PrefixCache<T>> shared;
        std::optional<PrefixCache<T>> expanded;
        if (strategy != Strategy::nocache) {
            shared.emplace(build_prefix_cache(w, sc.prompts, &acct, base.prefix_cols, &counters));
            if (strategy == Strategy::standard) {
                expanded.emplace(expand_standard(*shared, width, &acct));
                shared.reset();
            }
        }
        row.prefix_bytes = acct.live_bytes_labeled("prefix_cache") +
                           acct.live_bytes_labeled("prefix_cache_expanded");
        StrategyContext<T> ctx{strategy, expanded ? &*expanded : (shared ? &*shared : nullptr),
                               strategy == Strategy::standard};

        std::vector<std::vector<std::int32_t>> survivor(
            b_prompts, std::vector<std::int32_t>(sc.suffix_len, sc.init_token));
        for (std::size_t e = 0; e < sc.iterations; ++e) {
            Mat<std::int32_t> proposal_rows(b_prompts * width, sc.suffix_len);
            std::vector<std::vector<std::vector<std::int32_t>>> proposals(b_prompts);
            for (std::size_t b = 0; b < b_prompts; ++b) {
                proposals[b] =
                    propose_random_substitution({survivor[b]}, width, cfg.vocab_size, rng);
                for (std::size_t j = 0; j < width; ++j)
                    for (std::size_t i = 0; i < sc.suffix_len; ++i)
                        proposal_rows.at(b * width + j, i) = proposals[b][j][i];
            }
            AlignedBatch batch = write_suffix_candidates(base, proposal_rows, &acct);
            const auto losses = evaluate_candidates(w, batch, ctx, &acct, &counters);
            for (std::size_t b = 0; b < b_prompts; ++b) {
                const std::span<const double> slice(losses.data() + b * width, width);
                survivor[b] = proposals[b][select_topk(slice, 1).front()];
            }
        }
    } catch (const SimulatedOom&) {
        row.oom = true;
    }
    const auto t1 = std::chrono::steady_clock::now();
    row.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    row.cells_measured = counters.attention_cells.load();
    row.cells_predicted = predicted_cells_rows(
        strategy, sc.iterations, std::span<const RowLengths>(lens),
        std::span<const std::uint64_t>(prefix_lens));
    row.peak_bytes = acct.peak_bytes();

    if (!row.oom) {
        if (row.cells_measured != row.cells_predicted) {
            throw std::logic_error("benchmark cell count mismatch: strategy " +
                                   std::string(to_string(strategy)) + " width " +
                                   std::to_string(width) + ": measured " +
                                   std::to_string(row.cells_measured) + " != predicted " +
                                   std::to_string(row.cells_predicted));
        }
        const std::uint64_t n_cand = b_prompts * width;
        const std::uint64_t predicted_bytes =
            predicted_cache_bytes(strategy, cfg, b_prompts, n_cand, row.n_p, row.l_dec);
        const std::uint64_t allowance =
            bench_overhead_allowance(cfg, b_prompts, n_cand, row.n_p, row.l_dec);
        if (row.peak_bytes > predicted_bytes + allowance) {
            throw std::logic_error("benchmark peak bytes above model + allowance: " +
                                   std::to_string(row.peak_bytes) + " > " +
                                   std::to_string(predicted_bytes + allowance));
        }
    }
    return row;
}

template <typename T>
BenchRow bench_cell_beam(const Weights<T>& w, const BenchScenario& sc, Strategy strategy,
                         std::size_t width) {
    const std::size_t k1 = sc.beam_k1 ? sc.beam_k1 : width;
    const std::size_t k2 = width;
    BenchRow row;
    row.strategy = strategy;
    row.algo = Algo::beam;
    row.width = width;
    row.b_prompts = sc.prompts.size();
    row.iterations = sc.iterations;

    AttackConfig acfg;
    acfg.algo = Algo::beam;
    acfg.iterations = sc.iterations;
    acfg.beam_k1 = k1;
    acfg.beam_k2 = k2;
    acfg.suffix_len = sc.suffix_len;
    acfg.init_token = sc.init_token;
    acfg.seed = sc.seed;
    const AttackReport rep = run_attack(w, sc.prompts, sc.targets, acfg, strategy, sc.budget);

    std::size_t np = sc.prompts.front().ids.size();
    std::size_t nt = sc.targets.front().ids.size();
    row.n_p = np;
    row.l_dec = sc.suffix_len + nt;
    row.cells_measured = rep.counters.attention_cells;
    row.cells_predicted = predicted_cells_beam(strategy, std::min(sc.iterations, sc.suffix_len),
                                               k1, k2, np, nt, sc.prompts.size());
    row.peak_bytes = rep.peak_bytes;
    row.prefix_bytes = rep.prefix_bytes;
    row.wall_ms = rep.wall_ms;
    row.oom = rep.oom;
    if (!row.oom && row.cells_measured != row.cells_predicted) {
        throw std::logic_error("beam benchmark cell count mismatch: measured " +
                               std::to_string(row.cells_measured) + " != predicted " +
                               std::to_string(row.cells_predicted));
    }
    return row;
}

}  // namespace detail

// Runs every (strategy, width) cell with identical seeds; rows come back
// ordered by strategy then width regardless of completion order. Exact-count
// or peak-bound violations throw; simulated OOM becomes a result row.
template <typename T>
std::vector<BenchRow> run_benchmark(const Weights<T>& w, const BenchScenario& sc) {
    if (sc.widths.empty() || sc.strategies.empty())
        throw DegenerateInputError("run_benchmark: empty scenario grid");
    std::vector<std::pair<Strategy, std::size_t>> cells;
    for (const Strategy strategy : sc.strategies) {
        for (const std::size_t width : sc.widths) cells.emplace_back(strategy, width);
    }
    std::vector<BenchRow> rows(cells.size());
    const std::size_t n_threads =
        sc.parallel_cells ? std::min<std::size_t>(cells.size(),
                                                  std::thread::hardware_concurrency())
                          : 1;
    detail::for_each_row(cells.size(), n_threads, [&](std::size_t i) {
        if (sc.algo == Algo::beam) {
            rows[i] = detail::bench_cell_beam(w, sc, cells[i].first, cells[i].second);
        } else {
            rows[i] = detail::bench_cell_random(w, sc, cells[i].first, cells[i].second);
        }
    });
    return rows;
}

// --- complexity grid -------------------------------------------------------

struct ComplexityGrid {
    std::vector<std::size_t> n_p{0, 4, 8};
    std::vector<std::size_t> l_dec{4, 8, 12};
    std::vector<std::size_t> n_cand{1, 3, 8};
    std::size_t b_prompts = 1;
    std::size_t iterations = 2;
    std::uint64_t seed = 7;
};

struct ComplexityPoint {
    Strategy strategy = Strategy::pskv;
    std::size_t n_p = 0;
    std::size_t l_dec = 0;
    std::size_t n_cand = 0;
    std::uint64_t measured = 0;
    std::uint64_t predicted = 0;
    bool exact = false;
};

struct ComplexityReport {
    std::vector<ComplexityPoint> points;
    bool all_exact = true;
    double r2_nocache = 0.0;
    double r2_cached = 0.0;
    std::string first_mismatch;
};

namespace detail {

// Least-squares y = a*x + c fit quality.
inline double r_squared(std::span<const double> x, std::span<const double> y) {
    const std::size_t n = x.size();
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    const double denom = n * sxx - sx * sx;
    if (denom == 0) return 1.0;
    const double a = (n * sxy - sx * sy) / denom;
    const double c = (sy - a * sx) / n;
    double ss_res = 0, ss_tot = 0;
    const double mean_y = sy / n;
    for (std::size_t i = 0; i < n; ++i) {
        const double e = y[i] - (a * x[i] + c);
        ss_res += e * e;
        ss_tot += (y[i] - mean_y) * (y[i] - mean_y);
    }
    if (ss_tot == 0) return 1.0;
    return 1.0 - ss_res / ss_tot;
}

// Measures one grid point by driving the forward engine directly with
// synthetic uniform-length rows (supports n_p == 0, where the cached run
// degenerates to nocache).
template <typename T>
std::uint64_t measure_cells(const Weights<T>& w, Strategy strategy, std::size_t n_p,
                            std::size_t l_dec, std::size_t n_cand, std::size_t b_prompts,
                            std::size_t iterations, Rng& rng) {
    const ModelConfig& cfg = w.config;
    Counters counters;
    auto random_ids = [&](std::size_t n) {
        std::vector<std::int32_t> ids(n);
        for (auto& id : ids) id = static_cast<std::int32_t>(rng.bounded(cfg.vocab_size - 1));
        return ids;
    };

    std::optional<PrefixCache<T>> prefix;
    if (strategy != Strategy::nocache && n_p > 0) {
        std::vector<TokenSeq> prompts(b_prompts);
        for (auto& p : prompts) p.ids = random_ids(n_p);
        prefix.emplace(build_prefix_cache(w, prompts, nullptr, 0, &counters));
    }
    for (std::size_t e = 0; e < iterations; ++e) {
        CandidateCache<T> live(cfg, n_cand,
                               strategy == Strategy::nocache ? n_p + l_dec : l_dec, nullptr,
                               "scratch_kv");
        BatchInput<T> in;
        for (std::size_t r = 0; r < n_cand; ++r) {
            RowSpec spec;
            if (strategy == Strategy::nocache) {
                spec.tokens = random_ids(n_p + l_dec);
                spec.positions.resize(spec.tokens.size());
                std::iota(spec.positions.begin(), spec.positions.end(), 0);
            } else {
                spec.tokens = random_ids(l_dec);
                spec.positions.resize(l_dec);
                std::iota(spec.positions.begin(), spec.positions.end(),
                          static_cast<std::int32_t>(n_p));
                spec.prefix_row = r % b_prompts;
            }
            spec.live_row = r;
            in.rows.push_back(std::move(spec));
        }
        in.prefix = prefix ? &*prefix : nullptr;
        in.live = &live;
        in.counters = &counters;
        forward_batch(w, in);
    }
    return counters.attention_cells.load();
}

}  // namespace detail

// Exercises every grid point under all three strategies and checks measured
// cells against the closed forms with zero tolerance, then fits the
// asymptotic shapes.
template <typename T>
ComplexityReport verify_complexity(const Weights<T>& w, const ComplexityGrid& grid) {
    if (grid.n_p.size() < 3 || grid.l_dec.size() < 3 || grid.n_cand.size() < 3)
        throw DegenerateInputError("verify_complexity: grid must span >= 3 values per axis");
    ComplexityReport report;
    std::vector<double> x_nocache, y_nocache, x_cached, y_cached;
    Rng rng(grid.seed);
    for (const Strategy strategy :
         {Strategy::nocache, Strategy::standard, Strategy::pskv}) {
        for (const std::size_t n_p : grid.n_p) {
            for (const std::size_t l_dec : grid.l_dec) {
                for (const std::size_t n_cand : grid.n_cand) {
                    ComplexityPoint pt;
                    pt.strategy = strategy;
                    pt.n_p = n_p;
                    pt.l_dec = l_dec;
                    pt.n_cand = n_cand;
                    pt.measured = detail::measure_cells(w, strategy, n_p, l_dec, n_cand,
                                                        grid.b_prompts, grid.iterations, rng);
                    pt.predicted = predicted_cells(strategy, grid.iterations, n_cand, n_p, l_dec,
                                                   n_p > 0 ? grid.b_prompts : 0);
                    pt.exact = pt.measured == pt.predicted;
                    if (!pt.exact && report.first_mismatch.empty()) {
                        report.first_mismatch =
                            "strategy=" + std::string(to_string(strategy)) +
                            " n_p=" + std::to_string(n_p) + " l_dec=" + std::to_string(l_dec) +
                            " n_cand=" + std::to_string(n_cand) + " measured=" +
                            std::to_string(pt.measured) + " predicted=" +
                            std::to_string(pt.predicted);
                    }
                    report.all_exact = report.all_exact && pt.exact;
                    const double iter_scale =
                        static_cast<double>(grid.iterations) * static_cast<double>(n_cand);
                    if (strategy == Strategy::nocache) {
                        const double len = static_cast<double>(n_p + l_dec);
                        x_nocache.push_back(iter_scale * len * len);
                        y_nocache.push_back(static_cast<double>(pt.measured));
                    } else if (strategy == Strategy::pskv) {
                        const double form =
                            static_cast<double>(l_dec) * static_cast<double>(2 * n_p + l_dec);
                        x_cached.push_back(iter_scale * form);
                        const std::uint64_t prefix_cells =
                            (n_p > 0 ? grid.b_prompts : 0) * tri(n_p);
                        y_cached.push_back(static_cast<double>(pt.measured - prefix_cells));
                    }
                    report.points.push_back(pt);
                }
            }
        }
    }
    report.r2_nocache = detail::r_squared(x_nocache, y_nocache);
    report.r2_cached = detail::r_squared(x_cached, y_cached);
    return report;
}

}  // namespace pskv
