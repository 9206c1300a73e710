// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "qlfg/matrix.hpp"

namespace qlfg::attn {

enum class Kernel : std::uint8_t { naive = 0, streaming = 1 };

std::string to_string(Kernel k);
Kernel parse_kernel(std::string_view s);

// Additive mask value used by the naive kernel for future positions.
inline constexpr double kMaskValue = -1e9;

// Single head. Q, K, V are seq x head_dim. scale <= 0 selects 1/sqrt(head_dim).
template <typename T>
struct AttentionInputs {
    const Matrix<T>* Q = nullptr;
    const Matrix<T>* K = nullptr;
    const Matrix<T>* V = nullptr;
    bool causal = true;
    T scale = T{0};
    std::size_t tile_size = 64;
};

// softmax(Q K^T * scale + mask) V with the full seq x seq score matrix. If
// `probs` is non-null it receives the attention weights.
template <typename T>
Matrix<T> attention_naive(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, bool causal, T scale,
                          Matrix<T>* probs = nullptr);

// Online softmax over K/V tiles of `tile_size` columns. Keeps a running max,
// normalizer and output accumulator per row and never holds more than one
// seq x tile_size score block. Tiles entirely in the future of a row are
// skipped. If `lse` is non-null it receives the per-row log-sum-exp of the
// scaled scores.
template <typename T>
Matrix<T> attention_streaming(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, bool causal, T scale,
                              std::size_t tile_size, std::vector<T>* lse = nullptr);

template <typename T>
Matrix<T> attention_naive(const AttentionInputs<T>& in);
template <typename T>
Matrix<T> attention_streaming(const AttentionInputs<T>& in);

// Backward through the naive kernel from its stored weights.
template <typename T>
void attention_naive_backward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, const Matrix<T>& probs,
                              const Matrix<T>& d_out, T scale, Matrix<T>& dq, Matrix<T>& dk, Matrix<T>& dv);

// Backward through the streaming kernel, recomputing weights tile by tile from
// the forward output and log-sum-exp.
template <typename T>
void attention_streaming_backward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, const Matrix<T>& out,
                                  const std::vector<T>& lse, const Matrix<T>& d_out, bool causal, T scale,
                                  std::size_t tile_size, Matrix<T>& dq, Matrix<T>& dk, Matrix<T>& dv);

// Working memory model in bytes (fp32).
//   naive     : seq * seq * 4
//   streaming : seq * tile * 4 + 3 * seq * 4 + seq * head_dim * 4
std::uint64_t attention_workspace_bytes(std::uint64_t seq, std::uint64_t head_dim, std::uint64_t tile_size,
                                        Kernel kernel);

}  // namespace qlfg::attn
