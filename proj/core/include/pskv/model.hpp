#pragma once

// Deterministic toy decoder: pre-norm blocks of RMSNorm -> attention ->
// RMSNorm -> MLP (4x expansion, SiLU), rotary positions, grouped-query
// attention, untied output projection. Weights are fully determined by the
// seed. The same forward engine serves full recomputation and every cached
// configuration; per-token arithmetic does not depend on how the batch is
// split, which is what the equivalence suite relies on.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "pskv/errors.hpp"
#include "pskv/instrument.hpp"
#include "pskv/kvcache.hpp"
#include "pskv/mat.hpp"
#include "pskv/rng.hpp"
#include "pskv/types.hpp"

namespace pskv {

inline constexpr double kRmsNormEps = 1e-6;

template <typename T>
struct LayerWeights {
    Mat<T> wq, wk, wv, wo;
    Mat<T> w_mlp_in, w_mlp_out;
    std::vector<T> attn_norm_gain;
    std::vector<T> mlp_norm_gain;
};

template <typename T>
struct Weights {
    ModelConfig config;
    Mat<T> embedding;  // vocab x d_model
    std::vector<LayerWeights<T>> layers;
    std::vector<T> final_norm_gain;
    Mat<T> output_proj;  // d_model x vocab, untied
};

// All parameters drawn uniformly from [-1/sqrt(d_model), +1/sqrt(d_model)]
// in a fixed order, so one seed pins every bit of the model.
template <typename T>
Weights<T> init_model(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    auto draw = [&]() { return static_cast<T>((rng.next_double() * 2.0 - 1.0) * bound); };
    auto draw_mat = [&](std::size_t r, std::size_t c) {
        Mat<T> m(r, c);
        for (auto& x : m.data) x = draw();
        return m;
    };
    auto draw_vec = [&](std::size_t n) {
        std::vector<T> v(n);
        for (auto& x : v) x = draw();
        return v;
    };

    Weights<T> w;
    w.config = cfg;
    const std::size_t q_cols = cfg.n_q_heads * cfg.d_head;
    const std::size_t kv_cols = cfg.n_kv_heads * cfg.d_head;
    const std::size_t d_ff = 4 * cfg.d_model;
    w.embedding = draw_mat(cfg.vocab_size, cfg.d_model);
    w.layers.reserve(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        LayerWeights<T> lw;
        lw.attn_norm_gain = draw_vec(cfg.d_model);
        lw.wq = draw_mat(cfg.d_model, q_cols);
        lw.wk = draw_mat(cfg.d_model, kv_cols);
        lw.wv = draw_mat(cfg.d_model, kv_cols);
        lw.wo = draw_mat(q_cols, cfg.d_model);
        lw.mlp_norm_gain = draw_vec(cfg.d_model);
        lw.w_mlp_in = draw_mat(cfg.d_model, d_ff);
        lw.w_mlp_out = draw_mat(d_ff, cfg.d_model);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm_gain = draw_vec(cfg.d_model);
    w.output_proj = draw_mat(cfg.d_model, cfg.vocab_size);
    return w;
}

template <typename T>
Mat<T> rms_norm_rows(const Mat<T>& x, std::span<const T> gain) {
    Mat<T> out(x.rows, x.cols);
    for (std::size_t r = 0; r < x.rows; ++r) {
        const auto v = rms_norm<T>(std::span<const T>(x.row(r), x.cols), gain,
                                   static_cast<T>(kRmsNormEps));
        std::copy(v.begin(), v.end(), out.row(r));
    }
    return out;
}

template <typename T>
void add_inplace(Mat<T>& a, const Mat<T>& b) {
    if (a.rows != b.rows || a.cols != b.cols) throw ShapeError("add_inplace: shape mismatch");
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

template <typename T>
void silu_inplace(Mat<T>& m) {
    for (auto& x : m.data) x = x / (T(1) + std::exp(-x));
}

// One row of a batched forward: which tokens to process, their absolute
// positions, and where this row's history and live K/V live.
struct RowSpec {
    std::vector<std::int32_t> tokens;
    std::vector<std::int32_t> positions;
    std::size_t prefix_row = 0;  // row in BatchInput::prefix
    std::size_t hist_row = 0;    // row in BatchInput::history
    std::size_t live_row = 0;    // row in BatchInput::live
};

template <typename T>
struct BatchInput {
    std::vector<RowSpec> rows;
    const PrefixCache<T>* prefix = nullptr;      // slot-masked prompt history
    const CandidateCache<T>* history = nullptr;  // committed candidate history (beam parents)
    CandidateCache<T>* live = nullptr;           // receives this pass's K/V (required)
    Counters* counters = nullptr;
    bool count_candidate_tokens = false;
    // Rows touch disjoint cache rows and counters are atomic, so rows of one
    // layer may run on several threads; outputs are scheduling-independent.
    std::size_t n_threads = 1;
};

namespace detail {

template <typename F>
void for_each_row(std::size_t total, std::size_t n_threads, F&& fn) {
    if (n_threads <= 1 || total <= 1) {
        for (std::size_t i = 0; i < total; ++i) fn(i);
        return;
    }
    n_threads = std::min(n_threads, total);
    std::exception_ptr first_error;
    std::mutex error_mu;
    auto worker = [&](std::size_t begin, std::size_t end) {
        try {
            for (std::size_t i = begin; i < end; ++i) fn(i);
        } catch (...) {
            std::lock_guard<std::mutex> lock(error_mu);
            if (!first_error) first_error = std::current_exception();
        }
    };
    std::vector<std::thread> workers;
    workers.reserve(n_threads - 1);
    const std::size_t chunk = total / n_threads;
    for (std::size_t t = 0; t + 1 < n_threads; ++t) {
        workers.emplace_back(worker, t * chunk, (t + 1) * chunk);
    }
    worker((n_threads - 1) * chunk, total);
    for (auto& th : workers) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

// The batched forward pass. Keys are always presented to the kernel as
// [prefix | history | live] in ascending position order; prefix slots past a
// prompt's true length are skipped. Returns per-row logits for the fed
// positions.
template <typename T>
std::vector<Mat<T>> forward_batch(const Weights<T>& w, BatchInput<T>& in) {
    const ModelConfig& cfg = w.config;
    if (!in.live) throw ShapeError("forward_batch: live cache required");
    const std::size_t n_rows = in.rows.size();
    const std::size_t dh = cfg.d_head;
    const std::size_t group = cfg.n_q_heads / cfg.n_kv_heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    const T rope_base = static_cast<T>(cfg.rope_base);
    CellCounter* cells = in.counters ? &in.counters->attention_cells : nullptr;

    std::vector<Mat<T>> hidden(n_rows);
    for (std::size_t r = 0; r < n_rows; ++r) {
        const RowSpec& row = in.rows[r];
        if (row.tokens.empty()) throw DegenerateInputError("forward_batch: empty token row");
        if (row.positions.size() != row.tokens.size())
            throw ShapeError("forward_batch: positions length != tokens length");
        hidden[r] = Mat<T>(row.tokens.size(), cfg.d_model);
        for (std::size_t i = 0; i < row.tokens.size(); ++i) {
            const std::int32_t id = row.tokens[i];
            if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
                throw VocabError("forward_batch: token id " + std::to_string(id) +
                                 " outside vocabulary");
            std::memcpy(hidden[r].row(i), w.embedding.row(static_cast<std::size_t>(id)),
                        cfg.d_model * sizeof(T));
        }
        if (in.counters && in.count_candidate_tokens)
            in.counters->candidate_token_passes += row.tokens.size();
    }

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights<T>& lw = w.layers[l];
        const KVBlock<T>* prefix_blk = in.prefix ? &in.prefix->layer(l) : nullptr;
        const KVBlock<T>* hist_blk = in.history ? &in.history->layer(l) : nullptr;
        KVBlock<T>& live_blk = in.live->layer(l);
        detail::for_each_row(n_rows, in.n_threads, [&](std::size_t r) {
            const RowSpec& row = in.rows[r];
            const std::size_t n = row.tokens.size();
            const std::span<const std::int32_t> pos(row.positions);

            Mat<T> normed = rms_norm_rows(hidden[r], std::span<const T>(lw.attn_norm_gain));
            Mat<T> q = matmul(normed, lw.wq);
            Mat<T> k = matmul(normed, lw.wk);
            Mat<T> v = matmul(normed, lw.wv);
            for (std::size_t h = 0; h < cfg.n_q_heads; ++h)
                rope_rows(q.data.data() + h * dh, n, q.cols, dh, pos, rope_base);
            for (std::size_t g = 0; g < cfg.n_kv_heads; ++g)
                rope_rows(k.data.data() + g * dh, n, k.cols, dh, pos, rope_base);

            const std::size_t live_base = in.live->append(l, row.live_row, k, v);

            const std::size_t p_slots = prefix_blk ? prefix_blk->slots : 0;
            const std::size_t p_valid = in.prefix ? in.prefix->filled(l, row.prefix_row) : 0;
            const std::size_t h_len = in.history ? in.history->filled(l, row.hist_row) : 0;
            const std::size_t n_keys = p_slots + h_len + live_base + n;

            Mat<T> attn(n, cfg.n_q_heads * dh);
            for (std::size_t h = 0; h < cfg.n_q_heads; ++h) {
                // One attention cell = one logical (query, key) pair per
                // forward pass; heads and layers repeat the same pattern, so
                // count it exactly once.
                CellCounter* pass_cells = (l == 0 && h == 0) ? cells : nullptr;
                const std::size_t off = (h / group) * dh;
                auto key_ptr = [&](std::size_t j) -> const T* {
                    if (j < p_slots) return prefix_blk->k_at(row.prefix_row, j) + off;
                    if (j < p_slots + h_len) return hist_blk->k_at(row.hist_row, j - p_slots) + off;
                    return live_blk.k_at(row.live_row, j - p_slots - h_len) + off;
                };
                auto val_ptr = [&](std::size_t j) -> const T* {
                    if (j < p_slots) return prefix_blk->v_at(row.prefix_row, j) + off;
                    if (j < p_slots + h_len) return hist_blk->v_at(row.hist_row, j - p_slots) + off;
                    return live_blk.v_at(row.live_row, j - p_slots - h_len) + off;
                };
                auto visible = [&](std::size_t i, std::size_t j) {
                    if (j < p_slots) return j < p_valid;
                    if (j < p_slots + h_len) return true;
                    return j - p_slots - h_len <= live_base + i;
                };
                attention_core<T>(q.data.data() + h * dh, n, q.cols, dh, dh, n_keys, key_ptr,
                                  val_ptr, visible, scale, attn.data.data() + h * dh, attn.cols,
                                  pass_cells);
            }
            add_inplace(hidden[r], matmul(attn, lw.wo));

            Mat<T> m = rms_norm_rows(hidden[r], std::span<const T>(lw.mlp_norm_gain));
            Mat<T> up = matmul(m, lw.w_mlp_in);
            silu_inplace(up);
            add_inplace(hidden[r], matmul(up, lw.w_mlp_out));
        });
    }

    std::vector<Mat<T>> logits(n_rows);
    detail::for_each_row(n_rows, in.n_threads, [&](std::size_t r) {
        logits[r] = matmul(rms_norm_rows(hidden[r], std::span<const T>(w.final_norm_gain)),
                           w.output_proj);
    });
    return logits;
}

// Causal logits for a whole sequence. The gold reference for every
// equivalence check: no prefix cache, positions 0..n-1.
template <typename T>
Mat<T> forward_full(const Weights<T>& w, std::span<const std::int32_t> tokens,
                    Counters* counters = nullptr) {
    if (tokens.empty()) throw DegenerateInputError("forward_full: empty token sequence");
    CandidateCache<T> live(w.config, 1, tokens.size(), nullptr, "scratch_kv");
    BatchInput<T> in;
    RowSpec row;
    row.tokens.assign(tokens.begin(), tokens.end());
    row.positions.resize(tokens.size());
    std::iota(row.positions.begin(), row.positions.end(), 0);
    in.rows.push_back(std::move(row));
    in.live = &live;
    in.counters = counters;
    return std::move(forward_batch(w, in)[0]);
}

template <typename T>
struct CacheViewRef {
    const PrefixCache<T>* prefix = nullptr;
    std::size_t prefix_row = 0;
    const CandidateCache<T>* history = nullptr;
    std::size_t hist_row = 0;
};

template <typename T>
struct CachedForward {
    Mat<T> logits;               // one row per new token
    CandidateCache<T> appended;  // K/V of the new tokens
};

// Processes new_tokens against cached history. position_base must equal the
// number of real tokens already in the view.
template <typename T>
CachedForward<T> forward_with_cache(const Weights<T>& w, std::span<const std::int32_t> new_tokens,
                                    const CacheViewRef<T>& view, std::size_t position_base,
                                    Accountant* acct = nullptr, Counters* counters = nullptr) {
    if (new_tokens.empty()) throw DegenerateInputError("forward_with_cache: no new tokens");
    const std::size_t expected =
        (view.prefix ? view.prefix->filled(view.prefix_row) : 0) +
        (view.history ? view.history->filled(view.hist_row) : 0);
    if (position_base != expected)
        throw PositionError("forward_with_cache: position_base " + std::to_string(position_base) +
                            " != cached history length " + std::to_string(expected));
    CandidateCache<T> live(w.config, 1, new_tokens.size(), acct, "candidate_cache");
    BatchInput<T> in;
    RowSpec row;
    row.tokens.assign(new_tokens.begin(), new_tokens.end());
    row.positions.resize(new_tokens.size());
    std::iota(row.positions.begin(), row.positions.end(),
              static_cast<std::int32_t>(position_base));
    row.prefix_row = view.prefix_row;
    row.hist_row = view.hist_row;
    in.rows.push_back(std::move(row));
    in.prefix = view.prefix;
    in.history = view.history;
    in.live = &live;
    in.counters = counters;
    Mat<T> logits = std::move(forward_batch(w, in)[0]);
    return {std::move(logits), std::move(live)};
}

// One batched forward over the prompts, K/V committed to a fresh prefix
// cache (one row per prompt, left-aligned valid slots). max_slots == 0 sizes
// the cache to the longest prompt. When last_logits is given it receives the
// final real position's logits per prompt (the next-token distribution used
// to seed beam decoding).
template <typename T>
PrefixCache<T> build_prefix_cache(const Weights<T>& w, const std::vector<TokenSeq>& prompts,
                                  Accountant* acct, std::size_t max_slots = 0,
                                  Counters* counters = nullptr, Mat<T>* last_logits = nullptr) {
    if (prompts.empty()) throw DegenerateInputError("build_prefix_cache: no prompts");
    std::size_t np_max = 0;
    for (const auto& p : prompts) np_max = std::max(np_max, p.ids.size());
    if (max_slots != 0) {
        for (const auto& p : prompts) {
            if (p.ids.size() > max_slots)
                throw CapacityError("build_prefix_cache: prompt longer than configured max");
        }
        np_max = max_slots;
    }
    PrefixCache<T> cache(w.config, prompts.size(), np_max, acct, "prefix_cache");

    BatchInput<T> in;
    std::vector<std::size_t> fed;  // prompt index per fed row
    for (std::size_t b = 0; b < prompts.size(); ++b) {
        if (prompts[b].ids.empty()) continue;
        RowSpec row;
        row.tokens = prompts[b].ids;
        row.positions.resize(row.tokens.size());
        std::iota(row.positions.begin(), row.positions.end(), 0);
        row.live_row = b;
        in.rows.push_back(std::move(row));
        fed.push_back(b);
    }
    in.live = &cache;
    in.counters = counters;
    if (!in.rows.empty()) {
        auto logits = forward_batch(w, in);
        if (last_logits) {
            *last_logits = Mat<T>(prompts.size(), w.config.vocab_size);
            for (std::size_t i = 0; i < fed.size(); ++i) {
                const Mat<T>& lg = logits[i];
                std::memcpy(last_logits->row(fed[i]), lg.row(lg.rows - 1),
                            lg.cols * sizeof(T));
            }
        }
    } else if (last_logits) {
        throw DegenerateInputError("build_prefix_cache: last logits need nonempty prompts");
    }
    if (counters) counters->prefix_forwards += prompts.size();
    return cache;
}

// Negative log-likelihood of the target ids under the given logits rows.
// Row (first_row + i) is the distribution predicting target i. Per-token
// terms use log-sum-exp in double and are summed in sequence order, so equal
// logits bits give equal losses regardless of strategy.
template <typename T>
double target_nll(const Mat<T>& logits, std::size_t first_row,
                  std::span<const std::int32_t> target_ids,
                  std::span<const std::uint8_t> target_mask,
                  std::vector<double>* per_token = nullptr) {
    if (target_mask.size() != target_ids.size())
        throw ShapeError("target_nll: mask length != target length");
    if (first_row + target_ids.size() > logits.rows)
        throw ShapeError("target_nll: logits do not cover every target position");
    double total = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < target_ids.size(); ++i) {
        if (!target_mask[i]) continue;
        const T* row = logits.row(first_row + i);
        const std::int32_t id = target_ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= logits.cols)
            throw VocabError("target_nll: target id outside vocabulary");
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < logits.cols; ++j) {
            mx = std::max(mx, static_cast<double>(row[j]));
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < logits.cols; ++j) {
            sum += std::exp(static_cast<double>(row[j]) - mx);
        }
        const double nll = (mx + std::log(sum)) - static_cast<double>(row[id]);
        total += nll;
        ++used;
        if (per_token) per_token->push_back(nll);
    }
    if (used == 0) throw EmptyTargetError("target_nll: mask selects zero positions");
    return total;
}

template <typename T>
double target_nll(const Mat<T>& logits, const TokenSeq& target,
                  std::span<const std::uint8_t> target_mask,
                  std::vector<double>* per_token = nullptr) {
    return target_nll(logits, 0, std::span<const std::int32_t>(target.ids), target_mask,
                      per_token);
}

// --- raw weight dump (fixture format: shape header + little-endian data) ---

namespace detail {

template <typename T>
void write_tensor(std::ofstream& out, const Mat<T>& m) {
    const std::uint64_t r = m.rows, c = m.cols;
    out.write(reinterpret_cast<const char*>(&r), 8);
    out.write(reinterpret_cast<const char*>(&c), 8);
    out.write(reinterpret_cast<const char*>(m.data.data()),
              static_cast<std::streamsize>(m.data.size() * sizeof(T)));
}

template <typename T>
void write_tensor(std::ofstream& out, const std::vector<T>& v) {
    write_tensor(out, Mat<T>(1, v.size(), v));
}

template <typename T>
Mat<T> read_tensor(std::ifstream& in) {
    std::uint64_t r = 0, c = 0;
    in.read(reinterpret_cast<char*>(&r), 8);
    in.read(reinterpret_cast<char*>(&c), 8);
    Mat<T> m(r, c);
    in.read(reinterpret_cast<char*>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * sizeof(T)));
    if (!in) throw ParseError("weight dump truncated", 0);
    return m;
}

}  // namespace detail

template <typename T>
void save_weights(const std::string& path, const Weights<T>& w) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot open weight dump for writing: " + path, 0);
    out.write("PSKVW001", 8);
    const std::uint32_t prec = sizeof(T) == 4 ? 0u : 1u;
    out.write(reinterpret_cast<const char*>(&prec), 4);
    detail::write_tensor(out, w.embedding);
    for (const auto& lw : w.layers) {
        detail::write_tensor(out, lw.attn_norm_gain);
        detail::write_tensor(out, lw.wq);
        detail::write_tensor(out, lw.wk);
        detail::write_tensor(out, lw.wv);
        detail::write_tensor(out, lw.wo);
        detail::write_tensor(out, lw.mlp_norm_gain);
        detail::write_tensor(out, lw.w_mlp_in);
        detail::write_tensor(out, lw.w_mlp_out);
    }
    detail::write_tensor(out, Mat<T>(1, w.final_norm_gain.size(), w.final_norm_gain));
    detail::write_tensor(out, w.output_proj);
}

template <typename T>
Weights<T> load_weights(const std::string& path, const ModelConfig& cfg) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open weight dump: " + path, 0);
    char magic[8] = {};
    in.read(magic, 8);
    if (std::string(magic, 8) != "PSKVW001") throw ParseError("bad weight dump magic", 0);
    std::uint32_t prec = 0;
    in.read(reinterpret_cast<char*>(&prec), 4);
    if ((prec == 0) != (sizeof(T) == 4)) throw ParseError("weight dump precision mismatch", 0);
    Weights<T> w;
    w.config = cfg;
    w.embedding = detail::read_tensor<T>(in);
    w.layers.resize(cfg.n_layers);
    for (auto& lw : w.layers) {
        lw.attn_norm_gain = detail::read_tensor<T>(in).data;
        lw.wq = detail::read_tensor<T>(in);
        lw.wk = detail::read_tensor<T>(in);
        lw.wv = detail::read_tensor<T>(in);
        lw.wo = detail::read_tensor<T>(in);
        lw.mlp_norm_gain = detail::read_tensor<T>(in).data;
        lw.w_mlp_in = detail::read_tensor<T>(in);
        lw.w_mlp_out = detail::read_tensor<T>(in);
    }
    w.final_norm_gain = detail::read_tensor<T>(in).data;
    w.output_proj = detail::read_tensor<T>(in);
    return w;
}

}  // namespace pskv
