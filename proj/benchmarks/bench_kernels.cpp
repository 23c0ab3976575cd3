// Microbenchmarks for the hot paths: the attention kernel, full forwards,
// and candidate evaluation under each cache strategy.

#include <benchmark/benchmark.h>

#include "pskv/attack.hpp"
#include "pskv/model.hpp"

namespace {

using namespace pskv;

ModelConfig bench_model() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.n_q_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.d_head = 8;
    cfg.vocab_size = 61;
    cfg.seed = 42;
    return cfg;
}

std::vector<TokenSeq> random_seqs(std::size_t count, std::size_t len, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<TokenSeq> out(count);
    for (auto& s : out) {
        s.ids.resize(len);
        for (auto& id : s.ids) id = static_cast<std::int32_t>(rng.bounded(60));
    }
    return out;
}

void BM_MaskedAttention(benchmark::State& state) {
    const std::size_t n = state.range(0);
    Rng rng(1);
    Mat<float> q(n, 64), k(n, 64), v(n, 64);
    for (auto& x : q.data) x = static_cast<float>(rng.next_double() - 0.5);
    for (auto& x : k.data) x = static_cast<float>(rng.next_double() - 0.5);
    for (auto& x : v.data) x = static_cast<float>(rng.next_double() - 0.5);
    BoolMat mask(n, n, false);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) mask.at(i, j) = 1;
    for (auto _ : state) {
        auto out = masked_attention(q, k, v, mask, 0.125f, nullptr);
        benchmark::DoNotOptimize(out.data.data());
    }
    state.SetComplexityN(n);
}
BENCHMARK(BM_MaskedAttention)->RangeMultiplier(2)->Range(16, 256)->Complexity();

void BM_ForwardFull(benchmark::State& state) {
    const auto w = init_model<float>(bench_model());
    const auto seqs = random_seqs(1, state.range(0), 2);
    for (auto _ : state) {
        auto logits = forward_full(w, std::span<const std::int32_t>(seqs[0].ids));
        benchmark::DoNotOptimize(logits.data.data());
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_ForwardFull)->RangeMultiplier(2)->Range(16, 128)->Complexity();

void BM_EvaluateCandidates(benchmark::State& state) {
    const Strategy strategy = static_cast<Strategy>(state.range(0));
    const std::size_t width = state.range(1);
    const auto w = init_model<float>(bench_model());
    const auto prompts = random_seqs(1, 78, 3);
    auto targets = random_seqs(1, 16, 4);
    targets[0].role = Role::target;
    AlignedBatch base = align_batch(prompts, targets, 20, w.config.pad_id(), 33);
    Mat<std::int32_t> suffixes(width, 20);
    Rng rng(5);
    for (auto& x : suffixes.data) x = static_cast<std::int32_t>(rng.bounded(60));
    AlignedBatch batch = write_suffix_candidates(base, suffixes);

    std::optional<PrefixCache<float>> shared, expanded;
    StrategyContext<float> ctx;
    ctx.strategy = strategy;
    if (strategy != Strategy::nocache) {
        shared.emplace(build_prefix_cache(w, prompts, nullptr, base.prefix_cols));
        if (strategy == Strategy::standard) {
            expanded.emplace(expand_standard(*shared, width, nullptr));
            shared.reset();
            ctx.prefix = &*expanded;
            ctx.expanded = true;
        } else {
            ctx.prefix = &*shared;
        }
    }
    for (auto _ : state) {
        auto losses = evaluate_candidates(w, batch, ctx, nullptr, nullptr);
        benchmark::DoNotOptimize(losses.data());
    }
}
BENCHMARK(BM_EvaluateCandidates)
    ->ArgsProduct({{0, 1, 2}, {16, 64}})
    ->ArgNames({"strategy", "width"});

}  // namespace

BENCHMARK_MAIN();
