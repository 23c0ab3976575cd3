#pragma once

// Suffix-centric batch layout: prefixes are left-padded and targets
// right-padded so every candidate's suffix occupies the same column band
// [prefix_cols, prefix_cols + suffix_len). One dense token grid then serves
// any number of candidates per prompt.

#include <cstdint>
#include <cstring>
#include <vector>

#include "pskv/instrument.hpp"
#include "pskv/mat.hpp"
#include "pskv/types.hpp"

namespace pskv {

struct AlignedBatch {
    std::size_t n_prompts = 0;   // B
    std::size_t prefix_cols = 0; // N_p_max
    std::size_t suffix_len = 0;  // N_s
    std::size_t target_cols = 0; // N_t_max
    std::int32_t pad = 0;

    Mat<std::int32_t> tokens;  // rows x width
    BoolMat valid;             // true at real-token cells
    BoolMat target_mask;       // true at real target cells
    std::vector<std::int32_t> position_base;  // per row: true prefix length
    std::vector<std::int32_t> row_prompt;     // per row: prompt index
    std::vector<std::int32_t> prefix_len;     // per row: true prefix length
    std::vector<std::int32_t> target_len;     // per row: true target length

    TrackedAlloc grid_alloc;

    std::size_t rows() const { return tokens.rows; }
    std::size_t width() const { return prefix_cols + suffix_len + target_cols; }
    std::size_t suffix_begin() const { return prefix_cols; }
    std::size_t suffix_end() const { return prefix_cols + suffix_len; }
};

inline std::uint64_t grid_bytes(std::size_t rows, std::size_t width) {
    return static_cast<std::uint64_t>(rows) * width * sizeof(std::int32_t);
}

// Lays out B rows of [pad* prefix | suffix | target pad*]. The suffix band
// starts filled with init_token.
inline AlignedBatch align_batch(const std::vector<TokenSeq>& prompts,
                                const std::vector<TokenSeq>& targets, std::size_t suffix_len,
                                std::int32_t pad, std::int32_t init_token = 33,
                                Accountant* acct = nullptr) {
    if (prompts.size() != targets.size())
        throw ShapeError("align_batch: prompts and targets count differ");
    if (prompts.empty()) throw DegenerateInputError("align_batch: empty batch");
    if (suffix_len == 0) throw DegenerateInputError("align_batch: suffix_len must be >= 1");

    AlignedBatch batch;
    batch.n_prompts = prompts.size();
    batch.suffix_len = suffix_len;
    batch.pad = pad;
    for (std::size_t b = 0; b < prompts.size(); ++b) {
        if (prompts[b].ids.empty()) throw DegenerateInputError("align_batch: empty prompt");
        if (targets[b].ids.empty()) throw DegenerateInputError("align_batch: empty target");
        batch.prefix_cols = std::max(batch.prefix_cols, prompts[b].ids.size());
        batch.target_cols = std::max(batch.target_cols, targets[b].ids.size());
    }

    const std::size_t width = batch.width();
    const std::size_t rows = prompts.size();
    batch.grid_alloc = maybe_track(acct, "token_grid", grid_bytes(rows, width));
    batch.tokens = Mat<std::int32_t>(rows, width);
    batch.valid = BoolMat(rows, width, false);
    batch.target_mask = BoolMat(rows, width, false);
    batch.position_base.resize(rows);
    batch.row_prompt.resize(rows);
    batch.prefix_len.resize(rows);
    batch.target_len.resize(rows);

    for (std::size_t r = 0; r < rows; ++r) {
        const auto& p = prompts[r].ids;
        const auto& t = targets[r].ids;
        std::int32_t* row = batch.tokens.row(r);
        for (std::size_t c = 0; c < width; ++c) row[c] = pad;
        const std::size_t p_start = batch.prefix_cols - p.size();
        for (std::size_t i = 0; i < p.size(); ++i) {
            row[p_start + i] = p[i];
            batch.valid.at(r, p_start + i) = 1;
        }
        for (std::size_t i = 0; i < suffix_len; ++i) {
            row[batch.suffix_begin() + i] = init_token;
            batch.valid.at(r, batch.suffix_begin() + i) = 1;
        }
        for (std::size_t i = 0; i < t.size(); ++i) {
            row[batch.suffix_end() + i] = t[i];
            batch.valid.at(r, batch.suffix_end() + i) = 1;
            batch.target_mask.at(r, batch.suffix_end() + i) = 1;
        }
        batch.position_base[r] = static_cast<std::int32_t>(p.size());
        batch.prefix_len[r] = static_cast<std::int32_t>(p.size());
        batch.target_len[r] = static_cast<std::int32_t>(t.size());
        batch.row_prompt[r] = static_cast<std::int32_t>(r);
    }
    return batch;
}

// Replicates each prompt's row once per candidate (contiguous blocks: row i
// maps to prompt i / candidates_per_prompt) and overwrites the suffix band
// with the candidate rows. Cells outside the band are copied untouched.
inline AlignedBatch write_suffix_candidates(const AlignedBatch& base,
                                            const Mat<std::int32_t>& suffixes,
                                            Accountant* acct = nullptr) {
    if (suffixes.cols != base.suffix_len)
        throw ShapeError("write_suffix_candidates: wrong suffix width");
    if (suffixes.rows == 0 || suffixes.rows % base.n_prompts != 0)
        throw ShapeError("write_suffix_candidates: rows must be a positive multiple of prompts");
    const std::size_t per_prompt = suffixes.rows / base.n_prompts;
    const std::size_t width = base.width();

    AlignedBatch out;
    out.n_prompts = base.n_prompts;
    out.prefix_cols = base.prefix_cols;
    out.suffix_len = base.suffix_len;
    out.target_cols = base.target_cols;
    out.pad = base.pad;
    out.grid_alloc = maybe_track(acct, "token_grid", grid_bytes(suffixes.rows, width));
    out.tokens = Mat<std::int32_t>(suffixes.rows, width);
    out.valid = BoolMat(suffixes.rows, width, false);
    out.target_mask = BoolMat(suffixes.rows, width, false);
    out.position_base.resize(suffixes.rows);
    out.row_prompt.resize(suffixes.rows);
    out.prefix_len.resize(suffixes.rows);
    out.target_len.resize(suffixes.rows);

    for (std::size_t r = 0; r < suffixes.rows; ++r) {
        const std::size_t src = r / per_prompt;
        std::memcpy(out.tokens.row(r), base.tokens.row(src), width * sizeof(std::int32_t));
        std::memcpy(&out.valid.data[r * width], &base.valid.data[src * width], width);
        std::memcpy(&out.target_mask.data[r * width], &base.target_mask.data[src * width], width);
        for (std::size_t i = 0; i < base.suffix_len; ++i) {
            out.tokens.at(r, base.suffix_begin() + i) = suffixes.at(r, i);
        }
        out.position_base[r] = base.position_base[src];
        out.prefix_len[r] = base.prefix_len[src];
        out.target_len[r] = base.target_len[src];
        out.row_prompt[r] = static_cast<std::int32_t>(src);
    }
    return out;
}

// Pads carry position 0 (they are masked everywhere); the j-th real token of
// a row gets position j.
inline Mat<std::int32_t> position_ids(const AlignedBatch& batch) {
    Mat<std::int32_t> pos(batch.rows(), batch.width());
    for (std::size_t r = 0; r < batch.rows(); ++r) {
        std::int32_t next = 0;
        for (std::size_t c = 0; c < batch.width(); ++c) {
            pos.at(r, c) = batch.valid.at(r, c) ? next++ : 0;
        }
    }
    return pos;
}

}  // namespace pskv
