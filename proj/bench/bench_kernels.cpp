// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <benchmark/benchmark.h>

#include "qlfg/attention.hpp"
#include "qlfg/kernels.hpp"
#include "qlfg/model.hpp"
#include "qlfg/quantize.hpp"
#include "qlfg/rng.hpp"

namespace {

qlfg::MatrixF random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    qlfg::Rng rng(seed);
    qlfg::MatrixF m(r, c);
    for (auto& x : m.flat()) {
        x = static_cast<float>(rng.normal());
    }
    return m;
}

void BM_GemmSerial(benchmark::State& st) {
    const auto n = static_cast<std::size_t>(st.range(0));
    const auto a = random_matrix(n, n, 1);
    const auto b = random_matrix(n, n, 2);
    qlfg::MatrixF c;
    for (auto _ : st) {
        qlfg::kernels::serial::gemm_nt(a, b, c);
        benchmark::DoNotOptimize(c.data());
    }
    st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

void BM_GemmOpenMP(benchmark::State& st) {
    const auto n = static_cast<std::size_t>(st.range(0));
    const auto a = random_matrix(n, n, 1);
    const auto b = random_matrix(n, n, 2);
    qlfg::MatrixF c;
    for (auto _ : st) {
        qlfg::kernels::gemm_nt(a, b, c);
        benchmark::DoNotOptimize(c.data());
    }
    st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

void BM_QuantizeNF4(benchmark::State& st) {
    const auto n = static_cast<std::size_t>(st.range(0));
    const auto w = random_matrix(n, n, 3);
    for (auto _ : st) {
        auto q = qlfg::quant::quantize_nf4(w);
        benchmark::DoNotOptimize(q);
    }
    st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(n * n));
}

void BM_Dequantize(benchmark::State& st) {
    const auto n = static_cast<std::size_t>(st.range(0));
    const auto q = qlfg::quant::quantize_nf4(random_matrix(n, n, 3));
    for (auto _ : st) {
        auto w = qlfg::quant::dequantize(q);
        benchmark::DoNotOptimize(w.data());
    }
    st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(n * n));
}

void BM_AttentionNaive(benchmark::State& st) {
    const auto seq = static_cast<std::size_t>(st.range(0));
    const auto q = random_matrix(seq, 32, 4);
    const auto k = random_matrix(seq, 32, 5);
    const auto v = random_matrix(seq, 32, 6);
    for (auto _ : st) {
        auto o = qlfg::attn::attention_naive(q, k, v, true, 0.0f);
        benchmark::DoNotOptimize(o.data());
    }
}

void BM_AttentionStreaming(benchmark::State& st) {
    const auto seq = static_cast<std::size_t>(st.range(0));
    const auto q = random_matrix(seq, 32, 4);
    const auto k = random_matrix(seq, 32, 5);
    const auto v = random_matrix(seq, 32, 6);
    for (auto _ : st) {
        auto o = qlfg::attn::attention_streaming(q, k, v, true, 0.0f, 64);
        benchmark::DoNotOptimize(o.data());
    }
}

void BM_DeskForwardBackward(benchmark::State& st) {
    auto m = qlfg::model::build_model({}, 7);
    qlfg::model::freeze_and_quantize(m);
    qlfg::model::attach_adapters(m, qlfg::lora::TargetSelector::attention_plus_ffn_output, 4, 16.0f, 0.0f, 7);
    qlfg::model::Sequence s;
    for (int i = 0; i < static_cast<int>(st.range(0)); ++i) {
        s.tokens.push_back(i % 256);
        s.mask.push_back(1);
    }
    for (auto _ : st) {
        qlfg::model::AdapterGradMap grads;
        auto r = qlfg::model::forward_backward(m, {s}, {}, grads);
        benchmark::DoNotOptimize(r.loss);
    }
}

}  // namespace

BENCHMARK(BM_GemmSerial)->Arg(128)->Arg(256);
BENCHMARK(BM_GemmOpenMP)->Arg(128)->Arg(256);
BENCHMARK(BM_QuantizeNF4)->Arg(256)->Arg(1024);
BENCHMARK(BM_Dequantize)->Arg(256)->Arg(1024);
BENCHMARK(BM_AttentionNaive)->Arg(128)->Arg(512);
BENCHMARK(BM_AttentionStreaming)->Arg(128)->Arg(512);
BENCHMARK(BM_DeskForwardBackward)->Arg(64)->Arg(200);

BENCHMARK_MAIN();
