#pragma once

// Dense row-major matrices and the numeric kernels shared by every cache
// strategy. Strategies differ only in where key/value rows live; they all
// funnel through attention_core, so their floating-point operation sequence
// is identical and outputs can be compared bit for bit.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "pskv/errors.hpp"
#include "pskv/instrument.hpp"

namespace pskv {

template <typename T>
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;  // row-major, rows*cols elements

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, T(0)) {}
    Mat(std::size_t r, std::size_t c, std::vector<T> values)
        : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != rows * cols) throw ShapeError("Mat: data length != rows*cols");
    }

    T* row(std::size_t r) { return data.data() + r * cols; }
    const T* row(std::size_t r) const { return data.data() + r * cols; }
    T& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    bool operator==(const Mat& other) const = default;
};

struct BoolMat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> data;

    BoolMat() = default;
    BoolMat(std::size_t r, std::size_t c, bool fill = false)
        : rows(r), cols(c), data(r * c, fill ? 1 : 0) {}

    std::uint8_t& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    bool at(std::size_t r, std::size_t c) const { return data[r * cols + c] != 0; }
    std::size_t count_true() const {
        std::size_t n = 0;
        for (auto v : data) n += (v != 0);
        return n;
    }
};

// Standard product. For each output element the k-sum runs in ascending
// order; the i-k-j loop only changes memory access, not summation order.
template <typename T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
    if (a.cols != b.rows) throw ShapeError("matmul: a.cols != b.rows");
    Mat<T> out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        T* orow = out.row(i);
        const T* arow = a.row(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            const T aik = arow[k];
            const T* brow = b.row(k);
            for (std::size_t j = 0; j < b.cols; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    return out;
}

// Row-wise softmax with max-subtraction. -inf entries map to exactly 0
// because exp(-inf) == +0; a row with no finite entry is an error.
template <typename T>
Mat<T> softmax_rows(const Mat<T>& m) {
    Mat<T> out(m.rows, m.cols);
    const T neg_inf = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < m.rows; ++i) {
        const T* x = m.row(i);
        T mx = neg_inf;
        for (std::size_t j = 0; j < m.cols; ++j) {
            if (x[j] > mx) mx = x[j];
        }
        if (mx == neg_inf) throw MaskedRowError("softmax_rows: row has no finite entry");
        T denom = T(0);
        T* o = out.row(i);
        for (std::size_t j = 0; j < m.cols; ++j) {
            o[j] = std::exp(x[j] - mx);
            denom += o[j];
        }
        for (std::size_t j = 0; j < m.cols; ++j) o[j] = o[j] / denom;
    }
    return out;
}

// out[i] = gamma[i] * x[i] / sqrt(mean(x^2) + eps)
template <typename T>
std::vector<T> rms_norm(std::span<const T> x, std::span<const T> gamma, T eps) {
    if (x.size() != gamma.size()) throw ShapeError("rms_norm: x and gamma lengths differ");
    if (x.empty()) throw ShapeError("rms_norm: empty input");
    T mean_sq = T(0);
    for (const T v : x) mean_sq += v * v;
    mean_sq /= static_cast<T>(x.size());
    const T denom = std::sqrt(mean_sq + eps);
    if (denom == T(0)) throw DivisionByZeroError("rms_norm: zero vector with eps == 0");
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = gamma[i] * x[i] / denom;
    return out;
}

// Rotary embedding over contiguous head vectors: row r (one position's head
// vector) has its feature pair (2i, 2i+1) rotated by angle
// pos[r] * base^(-2i/d). Strided so callers can rotate one head inside a
// wider projection matrix.
template <typename T>
void rope_rows(T* base_ptr, std::size_t n_rows, std::size_t row_stride, std::size_t d_head,
               std::span<const std::int32_t> positions, T rope_base) {
    if (d_head % 2 != 0) throw ShapeError("rope: head dimension must be even");
    if (positions.size() != n_rows) throw ShapeError("rope: positions length != rows");
    for (std::size_t r = 0; r < n_rows; ++r) {
        T* row = base_ptr + r * row_stride;
        const T pos = static_cast<T>(positions[r]);
        for (std::size_t i = 0; i < d_head / 2; ++i) {
            const T theta = std::pow(rope_base, -static_cast<T>(2 * i) / static_cast<T>(d_head));
            const T angle = pos * theta;
            const T c = std::cos(angle);
            const T s = std::sin(angle);
            const T x0 = row[2 * i];
            const T x1 = row[2 * i + 1];
            row[2 * i] = x0 * c - x1 * s;
            row[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

template <typename T>
Mat<T> rope_apply(const Mat<T>& x, std::span<const std::int32_t> positions, T rope_base) {
    Mat<T> out = x;
    rope_rows(out.data.data(), out.rows, out.cols, out.cols, positions, rope_base);
    return out;
}

// The one attention kernel. Visible keys are scored in ascending key order
// with max-subtraction, then value rows are accumulated with weights
// exp(score - max) / denom, again in ascending key order. Masked keys are
// skipped outright -- they contribute exactly nothing -- which is what makes
// padded and unpadded runs, and all three cache strategies, agree to the
// last bit. Each scored (query, key) pair bumps the cell counter by one.
template <typename T, typename KeyPtr, typename ValPtr, typename Visible>
void attention_core(const T* q, std::size_t n_q, std::size_t q_stride, std::size_t d_key,
                    std::size_t d_val, std::size_t n_keys, KeyPtr&& key_ptr, ValPtr&& val_ptr,
                    Visible&& visible, T scale, T* out, std::size_t out_stride,
                    CellCounter* cells) {
    thread_local std::vector<T> scores;
    thread_local std::vector<std::uint32_t> picked;
    for (std::size_t qi = 0; qi < n_q; ++qi) {
        scores.clear();
        picked.clear();
        const T* qrow = q + qi * q_stride;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n_keys; ++j) {
            if (!visible(qi, j)) continue;
            const T* krow = key_ptr(j);
            T s = T(0);
            for (std::size_t f = 0; f < d_key; ++f) s += qrow[f] * krow[f];
            s *= scale;
            if (s > mx) mx = s;
            scores.push_back(s);
            picked.push_back(static_cast<std::uint32_t>(j));
        }
        if (picked.empty()) throw MaskedRowError("attention: query row with zero unmasked keys");
        if (cells) *cells += picked.size();
        T denom = T(0);
        for (auto& s : scores) {
            s = std::exp(s - mx);
            denom += s;
        }
        T* orow = out + qi * out_stride;
        for (std::size_t f = 0; f < d_val; ++f) orow[f] = T(0);
        for (std::size_t t = 0; t < picked.size(); ++t) {
            const T w = scores[t] / denom;
            const T* vrow = val_ptr(picked[t]);
            for (std::size_t f = 0; f < d_val; ++f) orow[f] += w * vrow[f];
        }
    }
}

// softmax_rows(scale * q k^T with masked cells at -inf) * v, without ever
// materializing the score matrix.
template <typename T>
Mat<T> masked_attention(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, const BoolMat& mask,
                        T scale, CellCounter* cells) {
    if (q.cols != k.cols) throw ShapeError("masked_attention: q.cols != k.cols");
    if (k.rows != v.rows) throw ShapeError("masked_attention: k.rows != v.rows");
    if (mask.rows != q.rows || mask.cols != k.rows) {
        throw ShapeError("masked_attention: mask shape must be q.rows x k.rows");
    }
    Mat<T> out(q.rows, v.cols);
    attention_core<T>(
        q.data.data(), q.rows, q.cols, q.cols, v.cols, k.rows,
        [&](std::size_t j) { return k.row(j); }, [&](std::size_t j) { return v.row(j); },
        [&](std::size_t i, std::size_t j) { return mask.at(i, j); }, scale, out.data.data(),
        out.cols, cells);
    return out;
}

}  // namespace pskv
