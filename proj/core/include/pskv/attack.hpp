#pragma once

// The search loop: heuristic candidate generation, batched forward
// evaluation, stable top-k selection. Two proposal schemes cover the two
// workload shapes: whole-suffix random substitution evaluated teacher-forced,
// and beam extension decoded incrementally against the shared prefix cache.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pskv/align.hpp"
#include "pskv/errors.hpp"
#include "pskv/instrument.hpp"
#include "pskv/kvcache.hpp"
#include "pskv/model.hpp"
#include "pskv/rng.hpp"
#include "pskv/types.hpp"

namespace pskv {

struct AttackConfig {
    std::size_t iterations = 50;             // E
    std::size_t survivors = 4;               // K
    std::size_t proposals_per_survivor = 16; // q (search width = K*q)
    std::size_t suffix_len = 20;
    Algo algo = Algo::random_substitution;
    std::size_t beam_k1 = 4;  // children sampled per beam
    std::size_t beam_k2 = 4;  // beams kept
    double success_threshold = 0.6931471805599453;  // nats/token
    std::int32_t init_token = 33;  // '!'
    std::uint64_t seed = 1;

    std::size_t width() const { return survivors * proposals_per_survivor; }

    void validate() const {
        if (width() < 1) throw ConfigError("attack.survivors", "K*q must be >= 1");
        if (suffix_len < 1) throw ConfigError("attack.suffix_len", "must be >= 1");
        if (beam_k1 < 1 || beam_k2 < 1)
            throw ConfigError("attack.beam_k1", "beam widths must be >= 1");
        if (success_threshold <= 0)
            throw ConfigError("attack.success_threshold", "must be > 0");
    }
};

// Caches an evaluation reads from. `expanded` says whether `prefix` holds one
// row per candidate (standard) or one row per prompt (pskv).
template <typename T>
struct StrategyContext {
    Strategy strategy = Strategy::nocache;
    const PrefixCache<T>* prefix = nullptr;
    bool expanded = false;
};

// Each proposal copies one survivor (round-robin over the survivor list) and
// replaces exactly one position with a different, uniformly chosen non-pad
// token.
inline std::vector<std::vector<std::int32_t>> propose_random_substitution(
    const std::vector<std::vector<std::int32_t>>& survivors, std::size_t count,
    std::size_t vocab_size, Rng& rng) {
    if (survivors.empty())
        throw DegenerateInputError("propose_random_substitution: no survivors");
    if (vocab_size < 3)
        throw DegenerateVocabError("propose_random_substitution: need >= 2 non-pad tokens");
    std::vector<std::vector<std::int32_t>> out;
    out.reserve(count);
    for (std::size_t j = 0; j < count; ++j) {
        std::vector<std::int32_t> cand = survivors[j % survivors.size()];
        const std::size_t pos = rng.bounded(cand.size());
        auto alt = static_cast<std::int32_t>(rng.bounded(vocab_size - 2));
        if (alt >= cand[pos]) ++alt;
        cand[pos] = alt;
        out.push_back(std::move(cand));
    }
    return out;
}

// Indices of the k lowest losses; ties keep the lower candidate index.
inline std::vector<std::size_t> select_topk(std::span<const double> losses, std::size_t k) {
    if (k > losses.size()) throw ShapeError("select_topk: k exceeds candidate count");
    std::vector<std::size_t> idx(losses.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return losses[a] < losses[b]; });
    idx.resize(k);
    return idx;
}

// Target NLL for every candidate row of an aligned batch, in row order.
// nocache feeds each full sequence; cached strategies feed only the
// suffix+target band against the prefix cache. logits_out (optional)
// receives each row's logits for the fed positions. The loss vector is
// always assembled in candidate-index order, however many threads run.
template <typename T>
std::vector<double> evaluate_candidates(const Weights<T>& w, const AlignedBatch& batch,
                                        const StrategyContext<T>& ctx, Accountant* acct,
                                        Counters* counters,
                                        std::vector<Mat<T>>* logits_out = nullptr,
                                        std::size_t n_threads = 1) {
    const ModelConfig& cfg = w.config;
    const std::size_t rows = batch.rows();
    const std::size_t l_dec = batch.suffix_len + batch.target_cols;
    const std::size_t per_prompt = rows / batch.n_prompts;

    BatchInput<T> in;
    in.rows.reserve(rows);
    CandidateCache<T> live;
    if (ctx.strategy == Strategy::nocache) {
        live = CandidateCache<T>(cfg, rows, batch.prefix_cols + l_dec, acct, "candidate_cache");
        for (std::size_t r = 0; r < rows; ++r) {
            RowSpec spec;
            for (std::size_t c = 0; c < batch.width(); ++c) {
                if (batch.valid.at(r, c)) spec.tokens.push_back(batch.tokens.at(r, c));
            }
            spec.positions.resize(spec.tokens.size());
            std::iota(spec.positions.begin(), spec.positions.end(), 0);
            spec.live_row = r;
            in.rows.push_back(std::move(spec));
        }
    } else {
        if (!ctx.prefix) throw ShapeError("evaluate_candidates: cached strategy without prefix");
        live = CandidateCache<T>(cfg, rows, l_dec, acct, "candidate_cache");
        const std::size_t copies = ctx.prefix->rows() / batch.n_prompts;
        for (std::size_t r = 0; r < rows; ++r) {
            RowSpec spec;
            for (std::size_t c = batch.suffix_begin(); c < batch.width(); ++c) {
                if (batch.valid.at(r, c)) spec.tokens.push_back(batch.tokens.at(r, c));
            }
            spec.positions.resize(spec.tokens.size());
            std::iota(spec.positions.begin(), spec.positions.end(), batch.position_base[r]);
            const auto prompt = static_cast<std::size_t>(batch.row_prompt[r]);
            if (ctx.expanded) {
                const std::size_t offset = r - prompt * per_prompt;
                if (offset >= copies)
                    throw IndexError("evaluate_candidates: expanded cache has too few copies");
                spec.prefix_row = prompt * copies + offset;
            } else {
                spec.prefix_row = prompt;
            }
            spec.live_row = r;
            in.rows.push_back(std::move(spec));
        }
        in.prefix = ctx.prefix;
    }
    in.live = &live;
    in.counters = counters;
    in.count_candidate_tokens = true;
    in.n_threads = n_threads;

    auto logits = forward_batch(w, in);
    if (counters && ctx.strategy == Strategy::nocache) counters->prefix_forwards += rows;

    std::vector<double> losses(rows);
    const std::vector<std::uint8_t> ones(batch.target_cols, 1);
    for (std::size_t r = 0; r < rows; ++r) {
        std::vector<std::int32_t> tgt;
        for (std::size_t c = batch.suffix_end(); c < batch.width(); ++c) {
            if (batch.target_mask.at(r, c)) tgt.push_back(batch.tokens.at(r, c));
        }
        const std::size_t first_row =
            (ctx.strategy == Strategy::nocache)
                ? static_cast<std::size_t>(batch.prefix_len[r]) + batch.suffix_len - 1
                : batch.suffix_len - 1;
        losses[r] = target_nll(logits[r], first_row, std::span<const std::int32_t>(tgt),
                               std::span<const std::uint8_t>(ones.data(), tgt.size()));
    }
    if (logits_out) *logits_out = std::move(logits);
    return losses;
}

struct SuccessCheck {
    bool success = false;
    bool exact_match = false;
    double mean_nll = 0.0;
    std::vector<double> per_token_nll;
    std::vector<std::int32_t> decoded;
};

// Success iff the mean per-token target NLL is at or below tau, or greedy
// decoding from prompt+suffix reproduces the target exactly.
template <typename T>
SuccessCheck check_success(const Weights<T>& w, const TokenSeq& prompt,
                           const std::vector<std::int32_t>& suffix, const TokenSeq& target,
                           double tau) {
    if (tau <= 0) throw ConfigError("attack.success_threshold", "must be > 0");
    SuccessCheck result;

    std::vector<std::int32_t> full = prompt.ids;
    full.insert(full.end(), suffix.begin(), suffix.end());
    const std::size_t scored_from = full.size() - 1;
    full.insert(full.end(), target.ids.begin(), target.ids.end());
    const Mat<T> logits = forward_full(w, std::span<const std::int32_t>(full));
    const std::vector<std::uint8_t> ones(target.ids.size(), 1);
    const double total =
        target_nll(logits, scored_from, std::span<const std::int32_t>(target.ids),
                   std::span<const std::uint8_t>(ones), &result.per_token_nll);
    result.mean_nll = total / static_cast<double>(target.ids.size());

    // Greedy decode against a cached prompt+suffix; ties pick the lowest id.
    TokenSeq seed;
    seed.ids = prompt.ids;
    seed.ids.insert(seed.ids.end(), suffix.begin(), suffix.end());
    Mat<T> frontier;
    PrefixCache<T> cache = build_prefix_cache(w, {seed}, nullptr, 0, nullptr, &frontier);
    CandidateCache<T> hist(w.config, 1, target.ids.size(), nullptr, "scratch_kv");
    const T* dist = frontier.row(0);
    std::vector<T> dist_copy(dist, dist + frontier.cols);
    for (std::size_t step = 0; step < target.ids.size(); ++step) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < dist_copy.size(); ++j) {
            if (dist_copy[j] > dist_copy[best]) best = j;
        }
        result.decoded.push_back(static_cast<std::int32_t>(best));
        if (step + 1 == target.ids.size()) break;
        BatchInput<T> in;
        RowSpec spec;
        spec.tokens = {static_cast<std::int32_t>(best)};
        spec.positions = {static_cast<std::int32_t>(seed.ids.size() + step)};
        in.rows.push_back(std::move(spec));
        in.prefix = &cache;
        in.history = nullptr;
        in.live = &hist;
        // hist already holds the decoded tokens; they stay visible as live keys
        Mat<T> step_logits = std::move(forward_batch(w, in)[0]);
        dist_copy.assign(step_logits.row(0), step_logits.row(0) + step_logits.cols);
    }
    result.exact_match = result.decoded == target.ids;
    result.success = result.mean_nll <= tau || result.exact_match;
    return result;
}

struct AttackReport {
    Strategy strategy = Strategy::pskv;
    Algo algo = Algo::random_substitution;
    std::size_t iterations_run = 0;
    std::vector<std::vector<double>> best_loss_curve;      // [prompt][0..iterations]
    std::vector<std::vector<std::int32_t>> final_suffix;   // per prompt
    std::vector<double> final_loss;                        // per prompt
    std::vector<std::uint8_t> success;                     // per prompt
    std::vector<double> mean_token_nll;                    // per prompt
    CountersSnapshot counters;
    std::uint64_t peak_bytes = 0;
    std::uint64_t prefix_bytes = 0;
    double wall_ms = 0.0;
    bool oom = false;
    std::string oom_detail;
};

namespace detail {

template <typename T>
void run_random_substitution(const Weights<T>& w, const std::vector<TokenSeq>& prompts,
                             const std::vector<TokenSeq>& targets, const AttackConfig& acfg,
                             Strategy strategy, Accountant& acct, Counters& counters,
                             AttackReport& rep) {
    const ModelConfig& cfg = w.config;
    const std::size_t n_prompts = prompts.size();
    const std::size_t kq = acfg.width();
    Rng rng(acfg.seed);

    AlignedBatch base =
        align_batch(prompts, targets, acfg.suffix_len, cfg.pad_id(), acfg.init_token, &acct);

    std::optional<PrefixCache<T>> shared;
    std::optional<PrefixCache<T>> expanded;
    if (strategy != Strategy::nocache) {
        shared.emplace(build_prefix_cache(w, prompts, &acct, base.prefix_cols, &counters));
        if (strategy == Strategy::standard) {
            expanded.emplace(expand_standard(*shared, kq, &acct));
            shared.reset();  // the replicated cache is the one the batch reads
        }
    }
    rep.prefix_bytes = acct.live_bytes_labeled("prefix_cache") +
                       acct.live_bytes_labeled("prefix_cache_expanded");
    StrategyContext<T> ctx{strategy, expanded ? &*expanded : (shared ? &*shared : nullptr),
                           strategy == Strategy::standard};

    // Iteration 0: evaluate the initial suffix once per prompt.
    const std::vector<std::int32_t> init_suffix(acfg.suffix_len, acfg.init_token);
    std::vector<std::vector<std::vector<std::int32_t>>> survivors(n_prompts);
    std::vector<std::vector<std::int32_t>> best_suffix(n_prompts, init_suffix);
    std::vector<double> best_loss(n_prompts);
    {
        Mat<std::int32_t> init_rows(n_prompts, acfg.suffix_len);
        for (std::size_t b = 0; b < n_prompts; ++b) {
            for (std::size_t i = 0; i < acfg.suffix_len; ++i)
                init_rows.at(b, i) = acfg.init_token;
        }
        AlignedBatch batch0 = write_suffix_candidates(base, init_rows, &acct);
        const auto losses = evaluate_candidates(w, batch0, ctx, &acct, &counters);
        for (std::size_t b = 0; b < n_prompts; ++b) {
            survivors[b] = {init_suffix};
            best_loss[b] = losses[b];
            rep.best_loss_curve[b].push_back(losses[b]);
        }
    }

    for (std::size_t iter = 0; iter < acfg.iterations; ++iter) {
        Mat<std::int32_t> proposal_rows(n_prompts * kq, acfg.suffix_len);
        std::vector<std::vector<std::vector<std::int32_t>>> proposals(n_prompts);
        for (std::size_t b = 0; b < n_prompts; ++b) {
            proposals[b] = propose_random_substitution(survivors[b], kq, cfg.vocab_size, rng);
            for (std::size_t j = 0; j < kq; ++j) {
                for (std::size_t i = 0; i < acfg.suffix_len; ++i)
                    proposal_rows.at(b * kq + j, i) = proposals[b][j][i];
            }
        }
        AlignedBatch batch = write_suffix_candidates(base, proposal_rows, &acct);
        const auto losses = evaluate_candidates(w, batch, ctx, &acct, &counters);
        for (std::size_t b = 0; b < n_prompts; ++b) {
            const std::span<const double> slice(losses.data() + b * kq, kq);
            const auto keep = select_topk(slice, std::min(acfg.survivors, kq));
            std::vector<std::vector<std::int32_t>> next;
            next.reserve(keep.size());
            for (const std::size_t j : keep) next.push_back(proposals[b][j]);
            survivors[b] = std::move(next);
            const std::size_t arg = keep.front();
            if (slice[arg] < best_loss[b]) {
                best_loss[b] = slice[arg];
                best_suffix[b] = proposals[b][arg];
            }
            rep.best_loss_curve[b].push_back(best_loss[b]);
        }
        rep.iterations_run = iter + 1;
    }

    for (std::size_t b = 0; b < n_prompts; ++b) {
        rep.final_suffix[b] = best_suffix[b];
        rep.final_loss[b] = best_loss[b];
        const auto check =
            check_success(w, prompts[b], best_suffix[b], targets[b], acfg.success_threshold);
        rep.success[b] = check.success ? 1 : 0;
        rep.mean_token_nll[b] = check.mean_nll;
    }
}

}  // namespace detail

// Incremental beam search over suffix tokens: every step extends each kept
// beam with its beam_k1 most probable next tokens, scores all children on
// the full target NLL, and keeps beam_k2. Under a cached strategy a child
// costs one committed suffix token plus a transient target-scoring pass;
// nocache rescores whole sequences. Construction performs iteration 0 (the
// empty suffix).
template <typename T>
class BeamSearch {
  public:
    struct Beam {
        std::vector<std::int32_t> suffix;
        double loss = 0.0;
        std::vector<T> frontier;  // next-token logits at the suffix frontier
    };

    BeamSearch(const Weights<T>& w, const std::vector<TokenSeq>& prompts,
               const std::vector<TokenSeq>& targets, const AttackConfig& acfg, Strategy strategy,
               Accountant& acct, Counters& counters)
        : w_(w), prompts_(prompts), targets_(targets), acfg_(acfg),
          cached_(strategy != Strategy::nocache), acct_(acct), counters_(counters),
          beams_(prompts.size()), beam_kv_(prompts.size()), best_(prompts.size()) {
        Mat<T> prompt_frontier;
        if (cached_) {
            shared_.emplace(
                build_prefix_cache(w, prompts, &acct, 0, &counters, &prompt_frontier));
            if (strategy == Strategy::standard) {
                expanded_.emplace(
                    expand_standard(*shared_, acfg.beam_k1 * acfg.beam_k2, &acct));
                shared_.reset();
            }
        }
        prefix_bytes_ = acct.live_bytes_labeled("prefix_cache") +
                        acct.live_bytes_labeled("prefix_cache_expanded");
        for (std::size_t b = 0; b < prompts.size(); ++b) score_empty_suffix(b, prompt_frontier);
    }

    // One extension round across all prompts; false once suffixes are full.
    bool step() {
        if (steps_taken_ >= acfg_.suffix_len) return false;
        for (std::size_t b = 0; b < prompts_.size(); ++b) extend_prompt(b);
        ++steps_taken_;
        return true;
    }

    std::size_t steps_taken() const { return steps_taken_; }
    std::uint64_t prefix_bytes() const { return prefix_bytes_; }
    const std::vector<Beam>& beams(std::size_t prompt) const { return beams_[prompt]; }
    const Beam& best(std::size_t prompt) const { return best_[prompt]; }

  private:
    const PrefixCache<T>* prefix() const {
        return expanded_ ? &*expanded_ : (shared_ ? &*shared_ : nullptr);
    }
    std::size_t prefix_copies() const {
        return prefix() ? prefix()->rows() / prompts_.size() : 0;
    }

    // Iteration 0: the first target token is scored from the prompt-frontier
    // distribution, the rest teacher-forced against the prefix.
    void score_empty_suffix(std::size_t b, const Mat<T>& prompt_frontier) {
        const auto& tgt = targets_[b].ids;
        const std::size_t np = prompts_[b].ids.size();
        std::vector<T> frontier;
        double loss = 0.0;
        if (cached_) {
            frontier.assign(prompt_frontier.row(b),
                            prompt_frontier.row(b) + prompt_frontier.cols);
            const Mat<T> fr(1, frontier.size(), frontier);
            const std::vector<std::uint8_t> one(1, 1);
            // Two passes produce the per-token terms, but the total must be
            // accumulated in one sequential chain to stay bit-identical with
            // the strategies that score all targets in a single call.
            std::vector<double> per_token;
            target_nll(fr, 0, std::span<const std::int32_t>(tgt.data(), 1),
                       std::span<const std::uint8_t>(one), &per_token);
            if (tgt.size() > 1) {
                CandidateCache<T> scratch(w_.config, 1, tgt.size() - 1, &acct_,
                                          "candidate_cache");
                BatchInput<T> in;
                RowSpec spec;
                spec.tokens.assign(tgt.begin(), tgt.end() - 1);
                spec.positions.resize(spec.tokens.size());
                std::iota(spec.positions.begin(), spec.positions.end(),
                          static_cast<std::int32_t>(np));
                spec.prefix_row = expanded_ ? b * prefix_copies() : b;
                in.rows.push_back(std::move(spec));
                in.prefix = prefix();
                in.live = &scratch;
                in.counters = &counters_;
                in.count_candidate_tokens = true;
                const Mat<T> lg = std::move(forward_batch(w_, in)[0]);
                const std::vector<std::uint8_t> ones(tgt.size() - 1, 1);
                target_nll(lg, 0,
                           std::span<const std::int32_t>(tgt.data() + 1, tgt.size() - 1),
                           std::span<const std::uint8_t>(ones), &per_token);
            }
            for (const double term : per_token) loss += term;
        } else {
            std::vector<std::int32_t> seq = prompts_[b].ids;
            seq.insert(seq.end(), tgt.begin(), tgt.end() - 1);
            const Mat<T> lg = forward_full(w_, std::span<const std::int32_t>(seq), &counters_);
            counters_.prefix_forwards += 1;
            const std::vector<std::uint8_t> ones(tgt.size(), 1);
            loss = target_nll(lg, np - 1, std::span<const std::int32_t>(tgt),
                              std::span<const std::uint8_t>(ones));
            frontier.assign(lg.row(np - 1), lg.row(np - 1) + lg.cols);
        }
        beams_[b].push_back(Beam{{}, loss, std::move(frontier)});
        if (cached_) beam_kv_[b].emplace(w_.config, 1, acfg_.suffix_len, &acct_, "beam_cache");
        best_[b] = beams_[b].front();
    }

    struct Child {
        std::size_t parent;
        std::int32_t token;
    };

    // Top beam_k1 non-pad next tokens per beam, by descending frontier
    // logit, ties to the lower id.
    std::vector<Child> propose_children(std::size_t b) const {
        const std::int32_t pad = w_.config.pad_id();
        std::vector<Child> children;
        for (std::size_t p = 0; p < beams_[b].size(); ++p) {
            const auto& fr = beams_[b][p].frontier;
            std::vector<std::int32_t> ids(fr.size());
            std::iota(ids.begin(), ids.end(), 0);
            ids.erase(std::remove(ids.begin(), ids.end(), pad), ids.end());
            const std::size_t take = std::min(acfg_.beam_k1, ids.size());
            std::partial_sort(ids.begin(), ids.begin() + take, ids.end(),
                              [&](std::int32_t a, std::int32_t bb) {
                                  if (fr[a] != fr[bb]) return fr[a] > fr[bb];
                                  return a < bb;
                              });
            for (std::size_t t = 0; t < take; ++t) children.push_back({p, ids[t]});
        }
        return children;
    }

    void extend_prompt(std::size_t b) {
        const auto& tgt = targets_[b].ids;
        const std::size_t np = prompts_[b].ids.size();
        const std::size_t parent_len = beams_[b][0].suffix.size();
        const std::vector<Child> children = propose_children(b);
        std::vector<double> child_loss(children.size());
        std::vector<std::vector<T>> child_frontier(children.size());
        const std::vector<std::uint8_t> ones(tgt.size(), 1);

        if (cached_) {
            CandidateCache<T> scoring(w_.config, children.size(), tgt.size(), &acct_,
                                      "candidate_cache");
            BatchInput<T> in;
            for (std::size_t c = 0; c < children.size(); ++c) {
                RowSpec spec;
                spec.tokens.push_back(children[c].token);
                spec.tokens.insert(spec.tokens.end(), tgt.begin(), tgt.end() - 1);
                spec.positions.resize(spec.tokens.size());
                std::iota(spec.positions.begin(), spec.positions.end(),
                          static_cast<std::int32_t>(np + parent_len));
                spec.prefix_row = expanded_ ? b * prefix_copies() + c : b;
                spec.hist_row = children[c].parent;
                spec.live_row = c;
                in.rows.push_back(std::move(spec));
            }
            in.prefix = prefix();
            in.history = &*beam_kv_[b];
            in.live = &scoring;
            in.counters = &counters_;
            in.count_candidate_tokens = true;
            const auto lgs = forward_batch(w_, in);
            for (std::size_t c = 0; c < children.size(); ++c) {
                child_loss[c] = target_nll(lgs[c], 0, std::span<const std::int32_t>(tgt),
                                           std::span<const std::uint8_t>(ones));
                child_frontier[c].assign(lgs[c].row(0), lgs[c].row(0) + lgs[c].cols);
            }
            // keep beam_k2 and rebuild the committed suffix caches: the
            // parent's rows plus the kept child token's K/V from the scoring
            // pass (bit-identical, already rotated at its position)
            const auto keep = select_topk(child_loss, std::min(acfg_.beam_k2, children.size()));
            CandidateCache<T> next_kv(w_.config, keep.size(), acfg_.suffix_len, &acct_,
                                      "beam_cache");
            std::vector<Beam> next;
            for (std::size_t t = 0; t < keep.size(); ++t) {
                const std::size_t c = keep[t];
                next_kv.copy_row_from(*beam_kv_[b], children[c].parent, t);
                for (std::size_t l = 0; l < w_.config.n_layers; ++l) {
                    const auto& blk = scoring.layer(l);
                    const Mat<T> k_row(
                        1, blk.kv_cols,
                        std::vector<T>(blk.k_at(c, 0), blk.k_at(c, 0) + blk.kv_cols));
                    const Mat<T> v_row(
                        1, blk.kv_cols,
                        std::vector<T>(blk.v_at(c, 0), blk.v_at(c, 0) + blk.kv_cols));
                    next_kv.append(l, t, k_row, v_row);
                }
                next.push_back(make_child_beam(b, children[c], child_loss[c],
                                               std::move(child_frontier[c])));
            }
            beams_[b] = std::move(next);
            beam_kv_[b] = std::move(next_kv);
        } else {
            for (std::size_t c = 0; c < children.size(); ++c) {
                std::vector<std::int32_t> seq = prompts_[b].ids;
                const auto& parent = beams_[b][children[c].parent].suffix;
                seq.insert(seq.end(), parent.begin(), parent.end());
                seq.push_back(children[c].token);
                seq.insert(seq.end(), tgt.begin(), tgt.end() - 1);
                const Mat<T> lg =
                    forward_full(w_, std::span<const std::int32_t>(seq), &counters_);
                counters_.prefix_forwards += 1;
                counters_.candidate_token_passes += seq.size();
                const std::size_t t_row = np + parent_len;
                child_loss[c] = target_nll(lg, t_row, std::span<const std::int32_t>(tgt),
                                           std::span<const std::uint8_t>(ones));
                child_frontier[c].assign(lg.row(t_row), lg.row(t_row) + lg.cols);
            }
            const auto keep = select_topk(child_loss, std::min(acfg_.beam_k2, children.size()));
            std::vector<Beam> next;
            for (const std::size_t c : keep) {
                next.push_back(make_child_beam(b, children[c], child_loss[c],
                                               std::move(child_frontier[c])));
            }
            beams_[b] = std::move(next);
        }

        if (beams_[b].front().loss < best_[b].loss) best_[b] = beams_[b].front();
    }

    Beam make_child_beam(std::size_t b, const Child& child, double loss,
                         std::vector<T>&& frontier) const {
        Beam nb;
        nb.suffix = beams_[b][child.parent].suffix;
        nb.suffix.push_back(child.token);
        nb.loss = loss;
        nb.frontier = std::move(frontier);
        return nb;
    }

    const Weights<T>& w_;
    const std::vector<TokenSeq>& prompts_;
    const std::vector<TokenSeq>& targets_;
    AttackConfig acfg_;
    bool cached_;
    Accountant& acct_;
    Counters& counters_;
    std::optional<PrefixCache<T>> shared_;
    std::optional<PrefixCache<T>> expanded_;
    std::vector<std::vector<Beam>> beams_;
    std::vector<std::optional<CandidateCache<T>>> beam_kv_;
    std::vector<Beam> best_;
    std::uint64_t prefix_bytes_ = 0;
    std::size_t steps_taken_ = 0;
};

namespace detail {

template <typename T>
void run_beam(const Weights<T>& w, const std::vector<TokenSeq>& prompts,
              const std::vector<TokenSeq>& targets, const AttackConfig& acfg, Strategy strategy,
              Accountant& acct, Counters& counters, AttackReport& rep) {
    BeamSearch<T> search(w, prompts, targets, acfg, strategy, acct, counters);
    rep.prefix_bytes = search.prefix_bytes();
    for (std::size_t b = 0; b < prompts.size(); ++b) {
        rep.best_loss_curve[b].push_back(search.best(b).loss);
    }
    for (std::size_t step = 0; step < acfg.iterations && search.step(); ++step) {
        for (std::size_t b = 0; b < prompts.size(); ++b) {
            rep.best_loss_curve[b].push_back(search.best(b).loss);
        }
        rep.iterations_run = step + 1;
    }

    for (std::size_t b = 0; b < prompts.size(); ++b) {
        const auto& best = search.best(b);
        rep.final_suffix[b] = best.suffix;
        rep.final_loss[b] = best.loss;
        if (!best.suffix.empty()) {
            const auto check =
                check_success(w, prompts[b], best.suffix, targets[b], acfg.success_threshold);
            rep.success[b] = check.success ? 1 : 0;
            rep.mean_token_nll[b] = check.mean_nll;
        } else {
            rep.success[b] = 0;
            rep.mean_token_nll[b] = best.loss / static_cast<double>(targets[b].ids.size());
        }
    }
}

}  // namespace detail

// E iterations of propose -> evaluate -> select, with iteration 0 being the
// evaluation of the initial suffix. A byte budget (if given) turns excess
// allocation into an OOM report rather than an exception.
template <typename T>
AttackReport run_attack(const Weights<T>& w, const std::vector<TokenSeq>& prompts,
                        const std::vector<TokenSeq>& targets, const AttackConfig& acfg,
                        Strategy strategy, std::optional<std::uint64_t> budget = {}) {
    acfg.validate();
    if (prompts.size() != targets.size())
        throw ShapeError("run_attack: prompts and targets count differ");
    for (const auto& p : prompts) validate_tokens(p, w.config.vocab_size, w.config.pad_id());
    for (const auto& t : targets) validate_tokens(t, w.config.vocab_size, w.config.pad_id());
    if (acfg.init_token == w.config.pad_id() ||
        static_cast<std::size_t>(acfg.init_token) >= w.config.vocab_size)
        throw ConfigError("attack.init_token", "must be a non-pad vocabulary id");

    Accountant acct;
    if (budget) acct.set_budget(*budget);
    Counters counters;
    AttackReport rep;
    rep.strategy = strategy;
    rep.algo = acfg.algo;
    rep.best_loss_curve.assign(prompts.size(), {});
    rep.final_suffix.assign(prompts.size(), {});
    rep.final_loss.assign(prompts.size(), 0.0);
    rep.success.assign(prompts.size(), 0);
    rep.mean_token_nll.assign(prompts.size(), 0.0);

    const auto t0 = std::chrono::steady_clock::now();
    try {
        if (acfg.algo == Algo::random_substitution) {
            detail::run_random_substitution(w, prompts, targets, acfg, strategy, acct, counters,
                                            rep);
        } else {
            detail::run_beam(w, prompts, targets, acfg, strategy, acct, counters, rep);
        }
    } catch (const SimulatedOom& oom) {
        rep.oom = true;
        rep.oom_detail = oom.what();
    }
    const auto t1 = std::chrono::steady_clock::now();
    counters.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    rep.counters = snapshot(counters);
    rep.wall_ms = counters.wall_ms;
    rep.peak_bytes = acct.peak_bytes();
    return rep;
}

}  // namespace pskv
