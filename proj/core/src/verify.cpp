#include "pskv/verify.hpp"

#include <chrono>
#include <cstring>
#include <ostream>
#include <sstream>

#include "pskv/attack.hpp"
#include "pskv/bench.hpp"
#include "pskv/rng.hpp"

namespace pskv {

namespace {

struct FamilyConfig {
    ModelConfig model;
    std::vector<std::size_t> prefix_lens;  // per prompt
    std::vector<std::size_t> target_lens;  // per prompt
    std::size_t suffix_len = 4;
    std::size_t cands_per_prompt = 1;
    std::uint64_t data_seed = 0;

    std::string describe(std::size_t index) const {
        std::ostringstream os;
        os << "config #" << index << " seed=" << model.seed << " layers=" << model.n_layers
           << " d_model=" << model.d_model << " q_heads=" << model.n_q_heads
           << " kv_heads=" << model.n_kv_heads << " vocab=" << model.vocab_size << " B="
           << prefix_lens.size() << " Kq=" << cands_per_prompt << " Ns=" << suffix_len << " Np=[";
        for (std::size_t i = 0; i < prefix_lens.size(); ++i)
            os << (i ? "," : "") << prefix_lens[i];
        os << "] Nt=[";
        for (std::size_t i = 0; i < target_lens.size(); ++i)
            os << (i ? "," : "") << target_lens[i];
        os << "]";
        return os.str();
    }
};

// Handful of fixed corner cases covering the extremes of the family ranges,
// then seeded random draws.
std::vector<FamilyConfig> make_family(std::uint64_t seed, std::size_t count) {
    std::vector<FamilyConfig> family;
    Rng rng(seed);

    auto corner = [&](std::size_t layers, std::size_t q_heads, std::size_t kv_heads,
                      std::size_t d_head, std::size_t b, std::size_t np_hi, std::size_t ns,
                      std::size_t nt_hi, std::size_t kq) {
        FamilyConfig fc;
        fc.model.n_layers = layers;
        fc.model.n_q_heads = q_heads;
        fc.model.n_kv_heads = kv_heads;
        fc.model.d_head = d_head;
        fc.model.d_model = q_heads * d_head;
        fc.model.vocab_size = 61;
        fc.model.seed = rng.next();
        fc.suffix_len = ns;
        fc.cands_per_prompt = kq;
        for (std::size_t i = 0; i < b; ++i) {
            fc.prefix_lens.push_back(4 + rng.bounded(np_hi - 3));
            fc.target_lens.push_back(4 + rng.bounded(nt_hi - 3));
        }
        fc.prefix_lens.front() = np_hi;  // pin the extreme
        fc.target_lens.front() = nt_hi;
        fc.data_seed = rng.next();
        family.push_back(std::move(fc));
    };

    // MHA minimum, GQA 2x mid, GQA 4x wide, MHA wide; one single-candidate
    // case and one at the full 64-candidate width.
    corner(1, 2, 2, 8, 1, 4, 4, 4, 1);    // d16 MHA, N_cand=1
    corner(2, 4, 2, 8, 2, 16, 8, 8, 4);   // d32 GQA 2x
    corner(4, 8, 2, 8, 4, 64, 20, 32, 16);  // d64 GQA 4x, N_cand=64, max lengths
    corner(2, 8, 8, 8, 1, 24, 6, 8, 8);   // d64 MHA
    corner(3, 4, 1, 4, 2, 12, 5, 6, 2);   // d16 GQA 4x, odd layer count

    if (family.size() > count) family.resize(count);
    while (family.size() < count) {
        FamilyConfig fc;
        fc.model.n_layers = 1 + rng.bounded(4);
        const std::size_t d_head = rng.bounded(2) ? 8 : 4;
        const std::size_t choices[] = {2, 4, 8};
        std::size_t q_heads = choices[rng.bounded(3)];
        while (q_heads * d_head < 16) q_heads *= 2;
        fc.model.n_q_heads = q_heads;
        const std::size_t groups[] = {1, 2, 4};
        std::size_t group = groups[rng.bounded(3)];
        while (q_heads % group != 0) group /= 2;
        fc.model.n_kv_heads = q_heads / group;
        fc.model.d_head = d_head;
        fc.model.d_model = q_heads * d_head;
        fc.model.vocab_size = rng.bounded(2) ? 61 : 33;
        fc.model.seed = rng.next();
        const std::size_t b = 1 + rng.bounded(4);
        fc.suffix_len = 4 + rng.bounded(9);  // 4..12
        const std::size_t max_cand = 24 / b;
        fc.cands_per_prompt = 1 + rng.bounded(max_cand);
        for (std::size_t i = 0; i < b; ++i) {
            fc.prefix_lens.push_back(4 + rng.bounded(21));  // 4..24
            fc.target_lens.push_back(4 + rng.bounded(13));  // 4..16
        }
        fc.data_seed = rng.next();
        family.push_back(std::move(fc));
    }
    return family;
}

std::vector<std::int32_t> random_ids(Rng& rng, std::size_t n, std::size_t vocab) {
    std::vector<std::int32_t> ids(n);
    for (auto& id : ids) id = static_cast<std::int32_t>(rng.bounded(vocab - 1));
    return ids;
}

template <typename T>
bool bits_equal(const Mat<T>& a, const Mat<T>& b) {
    return a.rows == b.rows && a.cols == b.cols &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(T)) == 0;
}

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

template <typename T>
struct StrategyRun {
    std::vector<double> losses;
    std::vector<Mat<T>> logits;
    std::uint64_t cells = 0;
    std::uint64_t prefix_forwards = 0;
};

template <typename T>
void verify_one(const FamilyConfig& fc, std::size_t index, bool inject_fault,
                VerifyResult& result, std::ostream* log) {
    const ModelConfig& cfg = fc.model;
    const Weights<T> w = init_model<T>(cfg);
    Rng data_rng(fc.data_seed);

    auto fail = [&](const std::string& what) {
        ++result.failures;
        result.failure_lines.push_back(fc.describe(index) + " FAILED: " + what);
        if (log) *log << result.failure_lines.back() << '\n';
    };
    auto check = [&](bool ok, const std::string& what) {
        ++result.checks_run;
        if (!ok) fail(what);
    };

    const std::size_t b = fc.prefix_lens.size();
    std::vector<TokenSeq> prompts(b), targets(b);
    for (std::size_t i = 0; i < b; ++i) {
        prompts[i].ids = random_ids(data_rng, fc.prefix_lens[i], cfg.vocab_size);
        targets[i].ids = random_ids(data_rng, fc.target_lens[i], cfg.vocab_size);
        targets[i].role = Role::target;
    }
    const std::size_t kq = fc.cands_per_prompt;
    const std::size_t rows = b * kq;

    AlignedBatch base = align_batch(prompts, targets, fc.suffix_len, cfg.pad_id(), 3, nullptr);
    Mat<std::int32_t> suffixes(rows, fc.suffix_len);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto ids = random_ids(data_rng, fc.suffix_len, cfg.vocab_size);
        for (std::size_t i = 0; i < fc.suffix_len; ++i) suffixes.at(r, i) = ids[i];
    }
    AlignedBatch batch = write_suffix_candidates(base, suffixes, nullptr);

    // one run per strategy
    StrategyRun<T> runs[3];
    const Strategy strategies[] = {Strategy::nocache, Strategy::standard, Strategy::pskv};
    for (int s = 0; s < 3; ++s) {
        Counters counters;
        std::optional<PrefixCache<T>> shared, expanded;
        StrategyContext<T> ctx;
        ctx.strategy = strategies[s];
        if (strategies[s] != Strategy::nocache) {
            shared.emplace(build_prefix_cache(w, prompts, nullptr, base.prefix_cols, &counters));
            if (inject_fault) {
                shared->layer(0).k[0] += T(0.25);  // corrupt one cached value
            }
            if (strategies[s] == Strategy::standard) {
                expanded.emplace(expand_standard(*shared, kq, nullptr));
                shared.reset();
                ctx.prefix = &*expanded;
                ctx.expanded = true;
            } else {
                ctx.prefix = &*shared;
            }
        }
        runs[s].losses =
            evaluate_candidates(w, batch, ctx, nullptr, &counters, &runs[s].logits);
        runs[s].cells = counters.attention_cells.load();
        runs[s].prefix_forwards = counters.prefix_forwards.load();
    }

    // strategy bit-identity: losses and logits at evaluated positions
    check(bits_equal(runs[0].losses, runs[1].losses),
          "loss vector differs: nocache vs standard");
    check(bits_equal(runs[0].losses, runs[2].losses), "loss vector differs: nocache vs pskv");
    bool logits_match = true;
    for (std::size_t r = 0; r < rows && logits_match; ++r) {
        const std::size_t np = static_cast<std::size_t>(batch.prefix_len[r]);
        const Mat<T>& full = runs[0].logits[r];  // rows: np + Ns + Nt(r)
        for (int s = 1; s < 3 && logits_match; ++s) {
            const Mat<T>& band = runs[s].logits[r];  // rows: Ns + Nt(r)
            if (band.rows + np != full.rows || band.cols != full.cols) {
                logits_match = false;
                break;
            }
            if (std::memcmp(band.data.data(), full.row(np),
                            band.data.size() * sizeof(T)) != 0) {
                logits_match = false;
            }
        }
    }
    check(logits_match, "logits differ across strategies at evaluated positions");

    // compute parity between the cached strategies
    check(runs[1].cells == runs[2].cells, "standard and pskv attention cells differ");
    check(runs[1].prefix_forwards == runs[2].prefix_forwards,
          "standard and pskv prefix forward counts differ");

    // exact cell counts vs the closed-form predictor (one evaluation round)
    std::vector<RowLengths> lens;
    std::vector<std::uint64_t> plens;
    for (std::size_t r = 0; r < rows; ++r) {
        lens.push_back({static_cast<std::uint64_t>(batch.prefix_len[r]),
                        fc.suffix_len + static_cast<std::uint64_t>(batch.target_len[r])});
    }
    for (std::size_t i = 0; i < b; ++i) plens.push_back(fc.prefix_lens[i]);
    for (int s = 0; s < 3; ++s) {
        const std::uint64_t predicted = predicted_cells_rows(
            strategies[s], 1, std::span<const RowLengths>(lens),
            std::span<const std::uint64_t>(plens));
        check(runs[s].cells == predicted,
              std::string("cell count mismatch for ") + to_string(strategies[s]) + ": measured " +
                  std::to_string(runs[s].cells) + " predicted " + std::to_string(predicted));
    }

    // padding neutrality: every row's batch logits equal its unpadded oracle
    bool padding_ok = true;
    for (std::size_t r = 0; r < rows && padding_ok; ++r) {
        std::vector<std::int32_t> seq;
        for (std::size_t c = 0; c < batch.width(); ++c) {
            if (batch.valid.at(r, c)) seq.push_back(batch.tokens.at(r, c));
        }
        const Mat<T> oracle = forward_full(w, std::span<const std::int32_t>(seq));
        if (!bits_equal(oracle, runs[0].logits[r])) padding_ok = false;
    }
    check(padding_ok, "aligned-batch logits differ from per-row unpadded oracle");

    // cache-split invariance at a data-seeded split point
    {
        std::vector<std::int32_t> seq;
        for (std::size_t c = 0; c < batch.width(); ++c) {
            if (batch.valid.at(0, c)) seq.push_back(batch.tokens.at(0, c));
        }
        const std::size_t split = 1 + data_rng.bounded(seq.size() - 1);
        const Mat<T> full = forward_full(w, std::span<const std::int32_t>(seq));
        std::vector<TokenSeq> head(1);
        head[0].ids.assign(seq.begin(), seq.begin() + split);
        PrefixCache<T> cache = build_prefix_cache(w, head, nullptr);
        CacheViewRef<T> view;
        view.prefix = &cache;
        const auto tail = forward_with_cache(
            w, std::span<const std::int32_t>(seq.data() + split, seq.size() - split), view, split);
        bool ok = tail.logits.rows + split == full.rows && tail.logits.cols == full.cols &&
                  std::memcmp(tail.logits.data.data(), full.row(split),
                              tail.logits.data.size() * sizeof(T)) == 0;
        check(ok, "cache-split logits differ from full forward at split " + std::to_string(split));
    }
}

template <typename T>
VerifyResult run_verify_impl(const VerifyOptions& options) {
    VerifyResult result;
    const auto t0 = std::chrono::steady_clock::now();
    const auto family = make_family(options.seed, options.n_configs);
    for (std::size_t i = 0; i < family.size(); ++i) {
        if (options.log) *options.log << family[i].describe(i) << '\n';
        verify_one<T>(family[i], i, options.inject_fault, result, options.log);
        ++result.configs_run;
    }
    const auto t1 = std::chrono::steady_clock::now();
    result.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    return result;
}

}  // namespace

VerifyResult run_verify(const VerifyOptions& options) {
    if (options.precision == Precision::f64) return run_verify_impl<double>(options);
    return run_verify_impl<float>(options);
}

}  // namespace pskv
