#pragma once

// Key/value cache storage. One KVCache backs both roles in the pipeline:
// as a PrefixCache it is filled once per prompt and read by every candidate;
// as a CandidateCache it grows per candidate row during decoding. Which rows
// a candidate reads is decided by an index map, never by copying -- except in
// the standard strategy, where expand_standard materializes the copies on
// purpose so their memory cost is measurable.

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "pskv/instrument.hpp"
#include "pskv/mat.hpp"
#include "pskv/types.hpp"

namespace pskv {

// Exact byte count of a K/V stack: 2 tensors x layers x rows x token slots
// x kv heads x head dim x element size.
inline std::uint64_t cache_bytes(const ModelConfig& cfg, std::uint64_t rows,
                                 std::uint64_t tokens) {
    return 2ull * cfg.n_layers * rows * tokens * cfg.n_kv_heads * cfg.d_head *
           elem_size(cfg.precision);
}

// One layer's K and V storage: rows x slots x (n_kv_heads * d_head).
template <typename T>
struct KVBlock {
    std::size_t rows = 0;
    std::size_t slots = 0;
    std::size_t kv_cols = 0;
    std::vector<T> k;
    std::vector<T> v;

    KVBlock() = default;
    KVBlock(std::size_t rows_, std::size_t slots_, std::size_t kv_cols_)
        : rows(rows_), slots(slots_), kv_cols(kv_cols_),
          k(rows_ * slots_ * kv_cols_, T(0)), v(rows_ * slots_ * kv_cols_, T(0)) {}

    T* k_at(std::size_t row, std::size_t slot) { return k.data() + (row * slots + slot) * kv_cols; }
    const T* k_at(std::size_t row, std::size_t slot) const {
        return k.data() + (row * slots + slot) * kv_cols;
    }
    T* v_at(std::size_t row, std::size_t slot) { return v.data() + (row * slots + slot) * kv_cols; }
    const T* v_at(std::size_t row, std::size_t slot) const {
        return v.data() + (row * slots + slot) * kv_cols;
    }
};

template <typename T>
class KVCache {
  public:
    KVCache() = default;

    // Registers its exact byte footprint with the accountant (if any) under
    // the given label; the registration is released when the cache dies.
    KVCache(const ModelConfig& cfg, std::size_t rows, std::size_t slots, Accountant* acct,
            std::string label)
        : cfg_(cfg), rows_(rows), slots_(slots) {
        alloc_ = maybe_track(acct, std::move(label), cache_bytes(cfg, rows, slots));
        layers_.reserve(cfg.n_layers);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            layers_.emplace_back(rows, slots, cfg.n_kv_heads * cfg.d_head);
        }
        filled_.assign(cfg.n_layers, std::vector<std::uint32_t>(rows, 0));
    }

    std::size_t rows() const { return rows_; }
    std::size_t slots() const { return slots_; }
    std::size_t n_layers() const { return layers_.size(); }
    const ModelConfig& config() const { return cfg_; }
    std::uint64_t bytes() const { return cache_bytes(cfg_, rows_, slots_); }

    KVBlock<T>& layer(std::size_t l) { return layers_[l]; }
    const KVBlock<T>& layer(std::size_t l) const { return layers_[l]; }

    // Token count committed to a row (layers advance in lockstep during a
    // forward pass; between passes all layers agree).
    std::size_t filled(std::size_t row) const { return filled_[0][row]; }
    std::size_t filled(std::size_t layer_idx, std::size_t row) const {
        return filled_[layer_idx][row];
    }

    // Appends n = k.rows tokens of K/V for one row at one layer, at the next
    // free slots. Returns the starting slot.
    std::size_t append(std::size_t layer_idx, std::size_t row, const Mat<T>& k_rows,
                       const Mat<T>& v_rows) {
        if (layer_idx >= layers_.size()) throw IndexError("kvcache: layer out of range");
        if (row >= rows_) throw IndexError("kvcache: row out of range");
        KVBlock<T>& blk = layers_[layer_idx];
        if (k_rows.cols != blk.kv_cols || v_rows.cols != blk.kv_cols ||
            k_rows.rows != v_rows.rows) {
            throw ShapeError("kvcache: appended K/V shape mismatch");
        }
        const std::size_t base = filled_[layer_idx][row];
        if (base + k_rows.rows > slots_) throw CapacityError("kvcache: row capacity exceeded");
        for (std::size_t i = 0; i < k_rows.rows; ++i) {
            std::memcpy(blk.k_at(row, base + i), k_rows.row(i), blk.kv_cols * sizeof(T));
            std::memcpy(blk.v_at(row, base + i), v_rows.row(i), blk.kv_cols * sizeof(T));
        }
        filled_[layer_idx][row] = static_cast<std::uint32_t>(base + k_rows.rows);
        return base;
    }

    // Raw copy of one row's committed tokens from another cache.
    void copy_row_from(const KVCache& src, std::size_t src_row, std::size_t dst_row) {
        const std::size_t n = src.filled(src_row);
        if (n > slots_) throw CapacityError("kvcache: copy exceeds row capacity");
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const KVBlock<T>& sb = src.layers_[l];
            KVBlock<T>& db = layers_[l];
            std::memcpy(db.k_at(dst_row, 0), sb.k_at(src_row, 0), n * db.kv_cols * sizeof(T));
            std::memcpy(db.v_at(dst_row, 0), sb.v_at(src_row, 0), n * db.kv_cols * sizeof(T));
            filled_[l][dst_row] = static_cast<std::uint32_t>(n);
        }
    }

  private:
    ModelConfig cfg_;
    std::size_t rows_ = 0;
    std::size_t slots_ = 0;
    std::vector<KVBlock<T>> layers_;
    std::vector<std::vector<std::uint32_t>> filled_;
    TrackedAlloc alloc_;
};

// A prefix cache is a KVCache holding one row per prompt (or, after
// expand_standard, one row per candidate). filled(row) is the prompt's true
// token length; slots beyond it are dead and never read.
template <typename T>
using PrefixCache = KVCache<T>;

template <typename T>
using CandidateCache = KVCache<T>;

// Public append op; thin forwarding kept for symmetry with the storage API.
template <typename T>
std::size_t append_candidate(CandidateCache<T>& cache, std::size_t layer_idx, std::size_t row,
                             const Mat<T>& new_k, const Mat<T>& new_v) {
    return cache.append(layer_idx, row, new_k, new_v);
}

// Physically replicates every prompt row `copies_per_prompt` times. The
// duplicated allocation is registered in full -- this is the standard-cache
// memory cost under test. Row i of the result serves candidate i, i.e. maps
// to prompt i / copies_per_prompt.
template <typename T>
PrefixCache<T> expand_standard(const PrefixCache<T>& prefix, std::size_t copies_per_prompt,
                               Accountant* acct) {
    if (copies_per_prompt < 1) throw ShapeError("expand_standard: copies_per_prompt must be >= 1");
    PrefixCache<T> out(prefix.config(), prefix.rows() * copies_per_prompt, prefix.slots(), acct,
                       "prefix_cache_expanded");
    for (std::size_t b = 0; b < prefix.rows(); ++b) {
        for (std::size_t c = 0; c < copies_per_prompt; ++c) {
            out.copy_row_from(prefix, b, b * copies_per_prompt + c);
        }
    }
    return out;
}

// Read-only, layer-scoped view mapping candidate rows onto a prefix cache
// without copying anything: candidate row i reads prompt row i / copies.
template <typename T>
class LayerView {
  public:
    LayerView(const PrefixCache<T>& cache, std::size_t layer_idx, std::size_t candidate_rows)
        : cache_(&cache), block_(&cache.layer(layer_idx)) {
        if (candidate_rows == 0 || candidate_rows % cache.rows() != 0) {
            throw IndexError("pskv_layer_view: candidate rows not a multiple of prompt rows");
        }
        copies_ = candidate_rows / cache.rows();
        rows_ = candidate_rows;
    }

    std::size_t rows() const { return rows_; }
    std::size_t slots() const { return block_->slots; }
    std::size_t valid_len(std::size_t cand_row) const { return cache_->filled(cand_row / copies_); }
    const T* k_at(std::size_t cand_row, std::size_t slot) const {
        return block_->k_at(cand_row / copies_, slot);
    }
    const T* v_at(std::size_t cand_row, std::size_t slot) const {
        return block_->v_at(cand_row / copies_, slot);
    }

  private:
    const PrefixCache<T>* cache_;
    const KVBlock<T>* block_;
    std::size_t copies_ = 1;
    std::size_t rows_ = 0;
};

template <typename T>
LayerView<T> pskv_layer_view(const PrefixCache<T>& prefix, std::size_t layer_idx,
                             std::size_t candidate_rows) {
    if (layer_idx >= prefix.n_layers()) throw IndexError("pskv_layer_view: layer out of range");
    return LayerView<T>(prefix, layer_idx, candidate_rows);
}

}  // namespace pskv
