// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "qlfg/matrix.hpp"
#include "qlfg/quantize.hpp"

namespace qlfg::lora {

// Which base matrices receive adapters. Matrix names are "layer<i>.<role>" with
// roles attn.{q,k,v,o}, ffn.{gate,up,down} (gated FFN) or ffn.{in,out} (plain).
enum class TargetSelector : std::uint8_t {
    key_query,
    all_attention,
    all_ffn,
    all_layers,
    attention_plus_ffn_output,  // attn.o + the FFN down/out projection
};

std::string to_string(TargetSelector s);
TargetSelector parse_target_selector(std::string_view s);
const std::vector<TargetSelector>& all_selectors();

// Role part of a "layer<i>.<role>" name, or empty if the name has no layer prefix.
std::string_view matrix_role(std::string_view name);
bool selector_matches(TargetSelector s, std::string_view matrix_name);

struct TargetSet {
    TargetSelector selector = TargetSelector::attention_plus_ffn_output;
    std::vector<std::string> resolved;

    // Resolved list preserves the order of `matrix_names`.
    static TargetSet resolve(TargetSelector selector, const std::vector<std::string>& matrix_names);
};

// Low-rank pair attached to a d x k base matrix W0. The adapter path adds
// (alpha / rank) * B * A * x; B starts at zero.
template <typename T>
struct LoRAAdapterT {
    Matrix<T> A;  // rank x k
    Matrix<T> B;  // d x rank
    int rank = 0;
    T alpha = T{16};
    T dropout_p = T{0};
    std::string target_name;

    T scale() const { return alpha / static_cast<T>(rank); }
    std::size_t d() const { return B.rows(); }
    std::size_t k() const { return A.cols(); }
    std::size_t param_count() const { return A.size() + B.size(); }
};

using LoRAAdapter = LoRAAdapterT<float>;

// A ~ N(0, 1/r) from the seeded generator, B = 0.
template <typename T>
LoRAAdapterT<T> init_adapter(std::size_t d, std::size_t k, int r, T alpha, T dropout_p, std::uint64_t seed,
                             std::string target_name = {});

// Inverted-dropout multipliers (0 or 1/(1-p)) for an n x k input.
template <typename T>
Matrix<T> dropout_mask(std::size_t n, std::size_t k, T p, std::uint64_t seed);

// Adapter path alone: scale * (x_eff A^T) B^T, where x_eff is the (possibly
// dropped-out) input. `z_out`, if non-null, receives x_eff A^T (n x rank).
template <typename T>
Matrix<T> adapter_delta(const Matrix<T>& x_eff, const LoRAAdapterT<T>& ad, Matrix<T>* z_out = nullptr);

// x W0^T + scale * (dropout(x) A^T) B^T. Dropout is the identity unless
// `training` is set and dropout_p > 0.
template <typename T>
Matrix<T> adapter_forward(const Matrix<T>& x, const Matrix<T>& base, const LoRAAdapterT<T>& ad, bool training,
                          std::uint64_t seed);
MatrixF adapter_forward(const MatrixF& x, const quant::QuantizedTensor& base, const LoRAAdapter& ad, bool training,
                        std::uint64_t seed, const quant::PrecisionPolicy& policy = {});

template <typename T>
struct AdapterGrads {
    Matrix<T> A;
    Matrix<T> B;
};

// Exact gradients of the adapter path w.r.t. A and B given dL/dy. `mask`, if
// non-null, is the dropout multiplier matrix used in the forward pass. No
// gradient is formed for the base matrix.
template <typename T>
AdapterGrads<T> adapter_grads(const Matrix<T>& x, const Matrix<T>& upstream, const LoRAAdapterT<T>& ad,
                              const Matrix<T>* mask = nullptr);

// Gradient w.r.t. the adapter's input (the x_eff side), added into dx_eff.
template <typename T>
void adapter_input_grad(const Matrix<T>& upstream, const LoRAAdapterT<T>& ad, Matrix<T>& dx_eff);

// W0 + scale * B A.
template <typename T>
Matrix<T> merge(const LoRAAdapterT<T>& ad, const Matrix<T>& base);

struct MatrixDims {
    std::string name;
    std::uint64_t d = 0;
    std::uint64_t k = 0;
};

struct TrainableCount {
    std::uint64_t params = 0;
    std::uint64_t total_base = 0;
    double fraction = 0.0;  // params / total_base
};

// sum over targeted matrices of r * (d + k).
TrainableCount count_trainable(const std::vector<MatrixDims>& dims, TargetSelector targets, int r);

// LLaMA2-70B geometry: 80 layers, hidden 8192, FFN 28672, 8 KV heads of 128,
// vocab 32000, untied embeddings.
std::vector<MatrixDims> llama2_70b_dims();

}  // namespace qlfg::lora
