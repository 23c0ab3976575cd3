#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pskv/errors.hpp"

namespace pskv {

enum class Precision { f32, f64 };

inline std::size_t elem_size(Precision p) { return p == Precision::f32 ? 4 : 8; }

inline const char* to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

// Which cache layout serves candidate evaluation.
//   nocache  - every evaluation recomputes the full sequence
//   standard - prefix cache physically replicated once per candidate row
//   pskv     - one prefix cache per prompt, index-mapped to candidate rows
enum class Strategy { nocache, standard, pskv };

inline const char* to_string(Strategy s) {
    switch (s) {
        case Strategy::nocache: return "nocache";
        case Strategy::standard: return "standard";
        default: return "pskv";
    }
}

enum class Algo { random_substitution, beam };

inline const char* to_string(Algo a) {
    return a == Algo::random_substitution ? "random_substitution" : "beam";
}

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t d_model = 32;
    std::size_t n_q_heads = 4;
    std::size_t n_kv_heads = 2;
    std::size_t d_head = 8;
    std::size_t vocab_size = 257;  // 256 byte values + 1 pad id
    double rope_base = 10000.0;
    std::uint64_t seed = 1;
    Precision precision = Precision::f32;

    std::int32_t pad_id() const { return static_cast<std::int32_t>(vocab_size) - 1; }

    void validate() const {
        if (n_layers == 0) throw ConfigError("model.n_layers", "must be >= 1");
        if (vocab_size < 2) throw ConfigError("model.vocab_size", "must be >= 2");
        if (n_q_heads == 0 || n_kv_heads == 0)
            throw ConfigError("model.n_q_heads", "head counts must be >= 1");
        if (n_q_heads % n_kv_heads != 0)
            throw ConfigError("model.n_kv_heads", "n_q_heads must be divisible by n_kv_heads");
        if (d_model != n_q_heads * d_head)
            throw ConfigError("model.d_model", "must equal n_q_heads * d_head");
        if (d_head % 2 != 0) throw ConfigError("model.d_head", "must be even (rotary pairs)");
        if (rope_base <= 0) throw ConfigError("model.rope_base", "must be > 0");
    }
};

enum class Role { prefix, suffix, target };

struct TokenSeq {
    std::vector<std::int32_t> ids;
    Role role = Role::prefix;
};

// Byte-level tokenization: one token per byte, ids 0..255.
inline TokenSeq tokens_from_bytes(const std::string& text, Role role) {
    TokenSeq seq;
    seq.role = role;
    seq.ids.reserve(text.size());
    for (unsigned char ch : text) seq.ids.push_back(static_cast<std::int32_t>(ch));
    return seq;
}

inline void validate_tokens(const TokenSeq& seq, std::size_t vocab_size, std::int32_t pad) {
    for (std::int32_t id : seq.ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab_size)
            throw VocabError("token id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(vocab_size));
        if (id == pad) throw VocabError("pad id must not appear inside a real sequence");
    }
}

}  // namespace pskv
