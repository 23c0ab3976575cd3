#include "pskv/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace pskv {

using nlohmann::json;

namespace {

void reject_unknown_keys(const json& obj, const std::string& scope,
                         const std::set<std::string>& allowed) {
    for (const auto& [key, value] : obj.items()) {
        if (!allowed.count(key)) {
            throw ConfigError(scope.empty() ? key : scope + "." + key, "unknown key");
        }
    }
}

template <typename V>
V get_or(const json& obj, const std::string& key, V fallback) {
    if (!obj.contains(key)) return fallback;
    return obj.at(key).get<V>();
}

Precision parse_precision(const std::string& s) {
    if (s == "f32") return Precision::f32;
    if (s == "f64") return Precision::f64;
    throw ConfigError("model.precision", "must be \"f32\" or \"f64\"");
}

Strategy parse_strategy(const std::string& s) {
    if (s == "nocache") return Strategy::nocache;
    if (s == "standard") return Strategy::standard;
    if (s == "pskv") return Strategy::pskv;
    throw ConfigError("strategy", "must be one of nocache|standard|pskv");
}

Algo parse_algo(const std::string& s) {
    if (s == "random_substitution") return Algo::random_substitution;
    if (s == "beam") return Algo::beam;
    throw ConfigError("attack.algo", "must be random_substitution or beam");
}

ReportFormat parse_format(const std::string& s) {
    if (s == "json") return ReportFormat::json;
    if (s == "csv") return ReportFormat::csv;
    throw ConfigError("format", "must be json or csv");
}

std::vector<TokenSeq> parse_sequences(const json& data, const std::string& text_key,
                                      const std::string& ids_key, Role role) {
    std::vector<TokenSeq> out;
    if (data.contains(text_key) && data.contains(ids_key)) {
        throw ConfigError("data." + ids_key, "give either byte strings or token ids, not both");
    }
    if (data.contains(text_key)) {
        for (const auto& s : data.at(text_key)) {
            out.push_back(tokens_from_bytes(s.get<std::string>(), role));
        }
    } else if (data.contains(ids_key)) {
        for (const auto& ids : data.at(ids_key)) {
            TokenSeq seq;
            seq.role = role;
            for (const auto& id : ids) seq.ids.push_back(id.get<std::int32_t>());
            out.push_back(std::move(seq));
        }
    }
    return out;
}

RunConfig from_json(const json& root) {
    reject_unknown_keys(root, "",
                        {"model", "attack", "data", "strategy", "budget_bytes", "out", "format"});
    RunConfig cfg;

    if (root.contains("model")) {
        const json& m = root.at("model");
        reject_unknown_keys(m, "model",
                            {"n_layers", "d_model", "n_q_heads", "n_kv_heads", "d_head",
                             "vocab_size", "rope_base", "seed", "precision"});
        cfg.model.n_layers = get_or<std::size_t>(m, "n_layers", cfg.model.n_layers);
        cfg.model.d_model = get_or<std::size_t>(m, "d_model", cfg.model.d_model);
        cfg.model.n_q_heads = get_or<std::size_t>(m, "n_q_heads", cfg.model.n_q_heads);
        cfg.model.n_kv_heads = get_or<std::size_t>(m, "n_kv_heads", cfg.model.n_kv_heads);
        cfg.model.d_head = get_or<std::size_t>(m, "d_head", cfg.model.d_head);
        cfg.model.vocab_size = get_or<std::size_t>(m, "vocab_size", cfg.model.vocab_size);
        cfg.model.rope_base = get_or<double>(m, "rope_base", cfg.model.rope_base);
        cfg.model.seed = get_or<std::uint64_t>(m, "seed", cfg.model.seed);
        if (m.contains("precision")) {
            cfg.model.precision = parse_precision(m.at("precision").get<std::string>());
        }
    }

    cfg.attack.seed = cfg.model.seed;
    if (root.contains("attack")) {
        const json& a = root.at("attack");
        reject_unknown_keys(a, "attack",
                            {"iterations", "survivors", "proposals_per_survivor", "suffix_len",
                             "algo", "beam_k1", "beam_k2", "success_threshold", "init_token",
                             "seed"});
        cfg.attack.iterations = get_or<std::size_t>(a, "iterations", cfg.attack.iterations);
        cfg.attack.survivors = get_or<std::size_t>(a, "survivors", cfg.attack.survivors);
        cfg.attack.proposals_per_survivor =
            get_or<std::size_t>(a, "proposals_per_survivor", cfg.attack.proposals_per_survivor);
        cfg.attack.suffix_len = get_or<std::size_t>(a, "suffix_len", cfg.attack.suffix_len);
        if (a.contains("algo")) cfg.attack.algo = parse_algo(a.at("algo").get<std::string>());
        cfg.attack.beam_k1 = get_or<std::size_t>(a, "beam_k1", cfg.attack.beam_k1);
        cfg.attack.beam_k2 = get_or<std::size_t>(a, "beam_k2", cfg.attack.beam_k2);
        cfg.attack.success_threshold =
            get_or<double>(a, "success_threshold", cfg.attack.success_threshold);
        cfg.attack.init_token = get_or<std::int32_t>(a, "init_token", cfg.attack.init_token);
        cfg.attack.seed = get_or<std::uint64_t>(a, "seed", cfg.attack.seed);
    }

    if (root.contains("data")) {
        const json& d = root.at("data");
        reject_unknown_keys(d, "data", {"prompts", "prompt_tokens", "targets", "target_tokens"});
        cfg.data.prompts = parse_sequences(d, "prompts", "prompt_tokens", Role::prefix);
        cfg.data.targets = parse_sequences(d, "targets", "target_tokens", Role::target);
    }

    if (root.contains("strategy"))
        cfg.strategy = parse_strategy(root.at("strategy").get<std::string>());
    if (root.contains("budget_bytes"))
        cfg.budget_bytes = root.at("budget_bytes").get<std::uint64_t>();
    cfg.out = get_or<std::string>(root, "out", "");
    if (root.contains("format")) cfg.format = parse_format(root.at("format").get<std::string>());

    cfg.validate();
    return cfg;
}

std::size_t line_of_offset(const std::string& text, std::size_t byte_offset) {
    std::size_t line = 1;
    for (std::size_t i = 0; i < byte_offset && i < text.size(); ++i) {
        if (text[i] == '\n') ++line;
    }
    return line;
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    attack.validate();
    if (data.prompts.empty()) throw ConfigError("data.prompts", "at least one prompt required");
    if (data.prompts.size() != data.targets.size())
        throw ConfigError("data.targets", "must pair one target per prompt");
    for (const auto& p : data.prompts) {
        if (p.ids.empty()) throw ConfigError("data.prompts", "empty prompt");
        validate_tokens(p, model.vocab_size, model.pad_id());
    }
    for (const auto& t : data.targets) {
        if (t.ids.empty()) throw ConfigError("data.targets", "empty target");
        validate_tokens(t, model.vocab_size, model.pad_id());
    }
    if (attack.init_token < 0 ||
        static_cast<std::size_t>(attack.init_token) >= model.vocab_size ||
        attack.init_token == model.pad_id())
        throw ConfigError("attack.init_token", "must be a non-pad vocabulary id");
}

RunConfig parse_config_text(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("config parse error: ") + e.what(),
                         line_of_offset(text, e.byte > 0 ? e.byte - 1 : 0));
    }
    return from_json(root);
}

RunConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("config file not found: " + path, 0);
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_config_text(buffer.str());
}

std::string effective_config_json(const RunConfig& cfg) {
    json root;
    root["model"] = {{"n_layers", cfg.model.n_layers},
                     {"d_model", cfg.model.d_model},
                     {"n_q_heads", cfg.model.n_q_heads},
                     {"n_kv_heads", cfg.model.n_kv_heads},
                     {"d_head", cfg.model.d_head},
                     {"vocab_size", cfg.model.vocab_size},
                     {"rope_base", cfg.model.rope_base},
                     {"seed", cfg.model.seed},
                     {"precision", to_string(cfg.model.precision)}};
    root["attack"] = {{"iterations", cfg.attack.iterations},
                      {"survivors", cfg.attack.survivors},
                      {"proposals_per_survivor", cfg.attack.proposals_per_survivor},
                      {"suffix_len", cfg.attack.suffix_len},
                      {"algo", to_string(cfg.attack.algo)},
                      {"beam_k1", cfg.attack.beam_k1},
                      {"beam_k2", cfg.attack.beam_k2},
                      {"success_threshold", cfg.attack.success_threshold},
                      {"init_token", cfg.attack.init_token},
                      {"seed", cfg.attack.seed}};
    json prompts = json::array();
    json targets = json::array();
    for (const auto& p : cfg.data.prompts) prompts.push_back(p.ids);
    for (const auto& t : cfg.data.targets) targets.push_back(t.ids);
    root["data"] = {{"prompt_tokens", prompts}, {"target_tokens", targets}};
    root["strategy"] = to_string(cfg.strategy);
    if (cfg.budget_bytes) root["budget_bytes"] = *cfg.budget_bytes;
    root["out"] = cfg.out;
    root["format"] = to_string(cfg.format);
    return root.dump(2);
}

}  // namespace pskv
