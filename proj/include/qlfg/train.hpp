// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qlfg/adapters.hpp"
#include "qlfg/datapipe.hpp"
#include "qlfg/model.hpp"
#include "qlfg/optimizer.hpp"

namespace qlfg::train {

struct TrainConfig {
    int batch_size = 4;
    int micro_batch_size = 1;
    int num_epochs = 1;
    double learning_rate = 3e-4;
    int cutoff_len = 1024;
    int lora_r = 4;
    double lora_alpha = 16.0;
    double lora_dropout = 0.05;
    lora::TargetSelector lora_target_modules = lora::TargetSelector::attention_plus_ffn_output;
    bool train_on_inputs = false;
    bool add_eos_token = true;
    bool group_by_length = true;
    OptimizerKind optimizer = OptimizerKind::adamw_8bit;
    std::string lr_scheduler = "cosine";
    double weight_decay = 0.0;
    int warmup_steps = 100;
    std::uint64_t seed = 42;

    // Throws ConfigError.
    void validate() const;
};

// ceil(records / batch_size) * num_epochs.
std::uint64_t total_steps(std::size_t records, const TrainConfig& cfg);

// Linear warmup from 0 to learning_rate over warmup_steps, then cosine decay to
// 0 at total_steps. Throws ConfigError if total_steps < warmup_steps.
double lr_at(std::uint64_t step, const TrainConfig& cfg, std::uint64_t total_steps);

struct Example {
    std::vector<int> input_ids;
    std::vector<std::uint8_t> loss_mask;
};

// prompt + response (+ EOS). Over cutoff_len the prompt is cut from the left;
// the response is only cut (from the right) if it alone exceeds cutoff_len.
// Returns nullopt for an empty response.
std::optional<Example> mask_targets(const std::vector<int>& prompt, const std::vector<int>& response,
                                    const TrainConfig& cfg);

struct TokenizedCorpus {
    std::vector<Example> examples;
    std::vector<std::string> warnings;
};

// Renders each record with the alpaca template and tokenizes it as
// BOS + prompt bytes, response bytes.
TokenizedCorpus build_examples(const std::vector<data::CorpusRecord>& records, const TrainConfig& cfg);

using Batches = std::vector<std::vector<std::size_t>>;

// Optimizer batches of batch_size records, split into micro-batches. With
// grouping, records are sorted by length before batching and the batch order
// is shuffled; without, records are shuffled first. Returns micro-batches in
// execution order.
Batches make_micro_batches(const std::vector<std::size_t>& lengths, std::size_t batch_size, std::size_t micro_batch_size,
                           bool group_by_length, std::uint64_t seed);
Batches group_by_length_batches(const std::vector<std::size_t>& lengths, std::size_t micro_batch_size,
                                std::uint64_t seed);
Batches random_batches(const std::vector<std::size_t>& lengths, std::size_t micro_batch_size, std::uint64_t seed);

// Pad tokens / total tokens when each micro-batch is padded to its longest member.
double padding_waste(const Batches& batches, const std::vector<std::size_t>& lengths);

// Sum of adapter gradients for one optimizer step over `micro_batches`, with
// the NLL of every micro-batch divided by the step's total target count.
struct StepGradients {
    model::AdapterGradMap grads;
    double loss = 0.0;
    std::size_t targets = 0;
    std::uint64_t peak_activation_bytes = 0;
};
StepGradients accumulate_gradients(const model::NanoTransformer& m, const std::vector<Example>& data,
                                   const Batches& micro_batches, bool training, std::uint64_t seed, std::uint64_t step);

// Applies one optimizer step to every adapter.
void apply_update(model::NanoTransformer& m, AdamW& opt, const model::AdapterGradMap& grads, double lr,
                  double weight_decay);

struct RunReport {
    std::uint64_t steps = 0;
    std::uint64_t peak_model_bytes = 0;
    std::uint64_t peak_optimizer_bytes = 0;
    std::uint64_t peak_activation_bytes_estimate = 0;
    std::uint64_t trainable_params = 0;
    std::uint64_t total_params = 0;
    double trainable_fraction = 0.0;
    double wall_seconds = 0.0;
    double final_loss = 0.0;
    double padding_waste = 0.0;
    std::vector<double> loss_curve;
    std::vector<double> lr_curve;
    std::vector<std::string> warnings;

    // Wall time is omitted when `include_wall_time` is false.
    std::string to_json(bool include_wall_time = true) const;
};

struct TrainOptions {
    // Written with the last good adapters when training aborts on a
    // non-finite value.
    std::filesystem::path failure_checkpoint;
    std::function<void(std::uint64_t step, double loss)> on_step;
};

// Runs num_epochs over the examples. The model must have adapters attached.
RunReport train(model::NanoTransformer& m, const std::vector<Example>& data, const TrainConfig& cfg,
                const TrainOptions& opts = {});

// Masked token-mean loss over all examples with dropout off.
double evaluate_loss(const model::NanoTransformer& m, const std::vector<Example>& data);

// "N (P%)" with P = 100 * fraction to four decimals.
std::string format_trainable(std::uint64_t params, double fraction);

}  // namespace qlfg::train
