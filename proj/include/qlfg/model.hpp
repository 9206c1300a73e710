// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qlfg/adapters.hpp"
#include "qlfg/attention.hpp"
#include "qlfg/checkpoint.hpp"
#include "qlfg/matrix.hpp"
#include "qlfg/quantize.hpp"
#include "qlfg/tokenizer.hpp"

namespace qlfg::model {

enum class FfnKind : std::uint8_t { gated_silu = 0, plain_gelu = 1 };

std::string to_string(FfnKind k);
FfnKind parse_ffn_kind(std::string_view s);

struct NanoTransformerConfig {
    int n_layers = 4;
    int d_model = 128;
    int n_heads = 4;
    int d_ffn = 344;
    int vocab_size = ByteTokenizer::kVocabSize;
    int max_seq = 256;
    FfnKind ffn_kind = FfnKind::gated_silu;
    attn::Kernel kernel = attn::Kernel::naive;
    std::size_t tile_size = 64;

    int head_dim() const { return d_model / n_heads; }
    // Throws ConfigError.
    void validate() const;

    std::map<std::string, std::string> to_metadata() const;
    static NanoTransformerConfig from_metadata(const std::map<std::string, std::string>& meta);

    friend bool operator==(const NanoTransformerConfig&, const NanoTransformerConfig&) = default;
};

// A base weight (d_out x d_in, applied as x W^T). After freezing, `weight`
// holds dequantize(*quantized) and is never written again.
struct Linear {
    std::string name;
    MatrixF weight;
    std::optional<quant::QuantizedTensor> quantized;
    std::optional<lora::LoRAAdapter> adapter;
};

struct Layer {
    std::vector<float> attn_norm;
    std::vector<float> ffn_norm;
    Linear q, k, v, o;
    // Gated FFN uses gate/up/down. Plain FFN uses up as ffn.in and down as ffn.out.
    Linear gate, up, down;
};

struct AdapterSettings {
    lora::TargetSelector targets = lora::TargetSelector::attention_plus_ffn_output;
    int r = 4;
    float alpha = 16.0f;
    float dropout = 0.05f;
};

class NanoTransformer {
public:
    NanoTransformerConfig cfg;
    MatrixF embed;    // vocab x d_model
    MatrixF lm_head;  // vocab x d_model
    std::vector<float> final_norm;
    std::vector<Layer> layers;

    bool frozen = false;
    quant::PrecisionPolicy policy;
    std::size_t block_size = quant::kDefaultBlockSize;
    std::size_t superblock_size = quant::kDefaultSuperblockSize;
    std::optional<AdapterSettings> adapters;

    // Targetable matrices in layer order.
    std::vector<std::string> matrix_names() const;
    Linear& linear(const std::string& name);
    const Linear& linear(const std::string& name) const;
    std::vector<Linear*> linears();
    std::vector<const Linear*> linears() const;

    // Every base tensor, including embeddings and norms (norms as 1 x d).
    std::vector<lora::MatrixDims> dims() const;
    std::uint64_t base_param_count() const;
    std::uint64_t adapter_param_count() const;
    std::size_t adapter_count() const;
};

NanoTransformer build_model(const NanoTransformerConfig& cfg, std::uint64_t seed);

// Replaces every targetable matrix with its NF4 encoding. Norms, embeddings
// and lm_head stay fp32. Idempotent.
void freeze_and_quantize(NanoTransformer& m, const quant::PrecisionPolicy& policy = {},
                         std::size_t block_size = quant::kDefaultBlockSize,
                         std::size_t superblock_size = quant::kDefaultSuperblockSize);

// One adapter per resolved target; adapter seeds derive from (seed, name).
void attach_adapters(NanoTransformer& m, lora::TargetSelector targets, int r, float alpha, float dropout,
                     std::uint64_t seed);

// Stored bytes of the base weights: quantized payloads plus fp32 residue.
std::uint64_t model_storage_bytes(const NanoTransformer& m);

// A tokenized example. mask[t] = 1 marks token t as a prediction target
// (predicted from tokens 0..t-1); mask[0] is ignored.
struct Sequence {
    std::vector<int> tokens;
    std::vector<std::uint8_t> mask;
};

struct ForwardOptions {
    bool training = false;  // enables adapter dropout
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    std::uint64_t stream = 0;  // e.g. micro-batch index
    // Divisor for the summed NLL; 0 uses this batch's target count.
    double loss_denominator = 0.0;
    bool keep_logits = false;
};

struct LossResult {
    double loss = 0.0;
    double nll_sum = 0.0;
    std::size_t target_count = 0;
    bool empty_mask = false;  // no targets: loss defined as 0
    MatrixF logits;           // rows concatenated over sequences, if requested
};

using AdapterGradMap = std::map<std::string, lora::AdapterGrads<float>>;

LossResult forward_loss(const NanoTransformer& m, const std::vector<Sequence>& batch, const ForwardOptions& opts = {});

// Forward plus backward. Gradients of the mean loss w.r.t. every adapter's A
// and B are added into `grads` (entries created as needed). No gradient is
// formed for any base tensor.
LossResult forward_backward(const NanoTransformer& m, const std::vector<Sequence>& batch, const ForwardOptions& opts,
                            AdapterGradMap& grads);

// Logits for every position of one sequence (seq x vocab).
MatrixF compute_logits(const NanoTransformer& m, const std::vector<int>& tokens);

// log p(tokens[t] | tokens[0..t)) for t = 1..n-1, in fp64.
std::vector<double> token_logprobs(const NanoTransformer& m, const std::vector<int>& tokens);

std::vector<int> generate_greedy(const NanoTransformer& m, const std::vector<int>& prompt, int max_new_tokens);

// Estimated activation bytes kept for backward on a micro-batch of `tokens`
// total tokens whose longest sequence is `max_len`.
std::uint64_t activation_bytes_estimate(const NanoTransformerConfig& cfg, std::uint64_t tokens, std::uint64_t max_len);

Checkpoint to_checkpoint(const NanoTransformer& m);
NanoTransformer from_checkpoint(const Checkpoint& ck);

// Adapter-only checkpoint: <target>.lora_A / <target>.lora_B plus metadata.
Checkpoint adapters_to_checkpoint(const NanoTransformer& m);
void load_adapters(NanoTransformer& m, const Checkpoint& ck);

}  // namespace qlfg::model
