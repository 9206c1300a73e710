// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "qlfg/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

#include <json.hpp>

#include "qlfg/errors.hpp"
#include "qlfg/rng.hpp"
#include "qlfg/tokenizer.hpp"

namespace qlfg::train {

void TrainConfig::validate() const {
    if (batch_size < 1 || micro_batch_size < 1) {
        throw ConfigError("batch_size and micro_batch_size must be >= 1");
    }
    if (batch_size % micro_batch_size != 0) {
        throw ConfigError("micro_batch_size (" + std::to_string(micro_batch_size) + ") does not divide batch_size (" +
                          std::to_string(batch_size) + ")");
    }
    if (num_epochs < 0) {
        throw ConfigError("num_epochs must be >= 0");
    }
    if (!(learning_rate > 0.0)) {
        throw ConfigError("learning_rate must be > 0");
    }
    if (cutoff_len < 2) {
        throw ConfigError("cutoff_len must be >= 2");
    }
    if (lora_r < 1) {
        throw ConfigError("lora_r must be >= 1");
    }
    if (!(lora_alpha > 0.0)) {
        throw ConfigError("lora_alpha must be > 0");
    }
    if (!(lora_dropout >= 0.0 && lora_dropout < 1.0)) {
        throw ConfigError("lora_dropout must lie in [0, 1)");
    }
    if (lr_scheduler != "cosine") {
        throw ConfigError("unsupported lr_scheduler '" + lr_scheduler + "' (only cosine)");
    }
    if (weight_decay < 0.0) {
        throw ConfigError("weight_decay must be >= 0");
    }
    if (warmup_steps < 0) {
        throw ConfigError("warmup_steps must be >= 0");
    }
}

std::uint64_t total_steps(std::size_t records, const TrainConfig& cfg) {
    const auto b = static_cast<std::uint64_t>(cfg.batch_size);
    return (static_cast<std::uint64_t>(records) + b - 1) / b * static_cast<std::uint64_t>(cfg.num_epochs);
}

double lr_at(std::uint64_t step, const TrainConfig& cfg, std::uint64_t total) {
    const auto warm = static_cast<std::uint64_t>(cfg.warmup_steps);
    if (total < warm) {
        throw ConfigError("total steps (" + std::to_string(total) + ") are fewer than warmup_steps (" +
                          std::to_string(warm) + ")");
    }
    if (step < warm) {
        return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(warm);
    }
    if (step >= total) {
        return 0.0;
    }
    const double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
    return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::optional<Example> mask_targets(const std::vector<int>& prompt, const std::vector<int>& response,
                                    const TrainConfig& cfg) {
    if (response.empty()) {
        return std::nullopt;
    }
    std::vector<int> resp = response;
    if (cfg.add_eos_token) {
        resp.push_back(model::ByteTokenizer::kEos);
    }
    const auto cutoff = static_cast<std::size_t>(cfg.cutoff_len);
    if (resp.size() > cutoff) {
        resp.resize(cutoff);
    }
    const std::size_t room = cutoff - resp.size();
    const std::size_t keep = std::min(room, prompt.size());
    Example ex;
    ex.input_ids.assign(prompt.end() - static_cast<std::ptrdiff_t>(keep), prompt.end());
    ex.loss_mask.assign(keep, cfg.train_on_inputs ? 1 : 0);
    ex.input_ids.insert(ex.input_ids.end(), resp.begin(), resp.end());
    ex.loss_mask.insert(ex.loss_mask.end(), resp.size(), 1);
    return ex;
}

TokenizedCorpus build_examples(const std::vector<data::CorpusRecord>& records, const TrainConfig& cfg) {
    TokenizedCorpus out;
    for (const auto& r : records) {
        const auto rendered = data::render_alpaca(r);
        std::vector<int> prompt{model::ByteTokenizer::kBos};
        const auto body = model::ByteTokenizer::encode(rendered.prompt);
        prompt.insert(prompt.end(), body.begin(), body.end());
        auto ex = mask_targets(prompt, model::ByteTokenizer::encode(rendered.response), cfg);
        if (!ex) {
            out.warnings.push_back("record '" + r.id + "' has an empty response; skipped");
            continue;
        }
        out.examples.push_back(std::move(*ex));
    }
    return out;
}

namespace {

Batches split(const std::vector<std::vector<std::size_t>>& batches, std::size_t micro) {
    Batches out;
    for (const auto& b : batches) {
        for (std::size_t i = 0; i < b.size(); i += micro) {
            out.emplace_back(b.begin() + static_cast<std::ptrdiff_t>(i),
                             b.begin() + static_cast<std::ptrdiff_t>(std::min(i + micro, b.size())));
        }
    }
    return out;
}

std::vector<std::vector<std::size_t>> chunk(const std::vector<std::size_t>& order, std::size_t size) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < order.size(); i += size) {
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(i + size, order.size())));
    }
    return out;
}

}  // namespace

Batches make_micro_batches(const std::vector<std::size_t>& lengths, std::size_t batch_size, std::size_t micro_batch_size,
                           bool group_by_length, std::uint64_t seed) {
    if (batch_size < 1 || micro_batch_size < 1) {
        throw ConfigError("batch sizes must be >= 1");
    }
    std::vector<std::size_t> order(lengths.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    if (group_by_length) {
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return lengths[a] < lengths[b]; });
        auto batches = chunk(order, batch_size);
        rng.shuffle(batches);
        return split(batches, micro_batch_size);
    }
    rng.shuffle(order);
    return split(chunk(order, batch_size), micro_batch_size);
}

Batches group_by_length_batches(const std::vector<std::size_t>& lengths, std::size_t micro_batch_size,
                                std::uint64_t seed) {
    return make_micro_batches(lengths, micro_batch_size, micro_batch_size, true, seed);
}

Batches random_batches(const std::vector<std::size_t>& lengths, std::size_t micro_batch_size, std::uint64_t seed) {
    return make_micro_batches(lengths, micro_batch_size, micro_batch_size, false, seed);
}

double padding_waste(const Batches& batches, const std::vector<std::size_t>& lengths) {
    std::uint64_t total = 0;
    std::uint64_t pad = 0;
    for (const auto& b : batches) {
        std::size_t mx = 0;
        for (auto i : b) {
            mx = std::max(mx, lengths[i]);
        }
        for (auto i : b) {
            total += mx;
            pad += mx - lengths[i];
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(pad) / static_cast<double>(total);
}

namespace {

std::vector<model::Sequence> to_sequences(const std::vector<Example>& data, const std::vector<std::size_t>& idx) {
    std::vector<model::Sequence> seqs;
    seqs.reserve(idx.size());
    for (auto i : idx) {
        seqs.push_back({data[i].input_ids, data[i].loss_mask});
    }
    return seqs;
}

std::size_t count_targets(const Example& e) {
    std::size_t n = 0;
    for (std::size_t t = 1; t < e.loss_mask.size(); ++t) {
        n += e.loss_mask[t] != 0 ? 1 : 0;
    }
    return n;
}

}  // namespace

StepGradients accumulate_gradients(const model::NanoTransformer& m, const std::vector<Example>& data,
                                   const Batches& micro_batches, bool training, std::uint64_t seed, std::uint64_t step) {
    StepGradients sg;
    for (const auto& mb : micro_batches) {
        for (auto i : mb) {
            sg.targets += count_targets(data[i]);
        }
    }
    if (sg.targets == 0) {
        return sg;
    }
    double nll = 0.0;
    for (std::size_t k = 0; k < micro_batches.size(); ++k) {
        const auto seqs = to_sequences(data, micro_batches[k]);
        model::ForwardOptions fo;
        fo.training = training;
        fo.seed = seed;
        fo.step = step;
        fo.stream = k;
        fo.loss_denominator = static_cast<double>(sg.targets);
        const auto res = model::forward_backward(m, seqs, fo, sg.grads);
        nll += res.nll_sum;
        std::uint64_t tokens = 0;
        std::uint64_t max_len = 0;
        for (const auto& s : seqs) {
            tokens += s.tokens.size();
            max_len = std::max<std::uint64_t>(max_len, s.tokens.size());
        }
        sg.peak_activation_bytes =
            std::max(sg.peak_activation_bytes, model::activation_bytes_estimate(m.cfg, tokens, max_len));
    }
    sg.loss = nll / static_cast<double>(sg.targets);
    return sg;
}

void apply_update(model::NanoTransformer& m, AdamW& opt, const model::AdapterGradMap& grads, double lr,
                  double weight_decay) {
    std::vector<ParamRef> refs;
    std::vector<std::vector<float>> zero_bufs;
    zero_bufs.reserve(2 * m.adapter_count());
    for (model::Linear* l : m.linears()) {
        if (!l->adapter) {
            continue;
        }
        auto& ad = *l->adapter;
        auto it = grads.find(l->name);
        if (it != grads.end()) {
            refs.push_back({l->name + ".lora_A", ad.A.flat(), it->second.A.flat()});
            refs.push_back({l->name + ".lora_B", ad.B.flat(), it->second.B.flat()});
        } else {
            zero_bufs.emplace_back(ad.A.size(), 0.0f);
            refs.push_back({l->name + ".lora_A", ad.A.flat(), zero_bufs.back()});
            zero_bufs.emplace_back(ad.B.size(), 0.0f);
            refs.push_back({l->name + ".lora_B", ad.B.flat(), zero_bufs.back()});
        }
    }
    opt.step(refs, lr, weight_decay);
}

double evaluate_loss(const model::NanoTransformer& m, const std::vector<Example>& data) {
    double nll = 0.0;
    std::size_t targets = 0;
    constexpr std::size_t kChunk = 8;
    for (std::size_t i = 0; i < data.size(); i += kChunk) {
        std::vector<std::size_t> idx;
        for (std::size_t j = i; j < std::min(i + kChunk, data.size()); ++j) {
            idx.push_back(j);
        }
        const auto res = model::forward_loss(m, to_sequences(data, idx));
        nll += res.nll_sum;
        targets += res.target_count;
    }
    return targets == 0 ? 0.0 : nll / static_cast<double>(targets);
}

RunReport train(model::NanoTransformer& m, const std::vector<Example>& data, const TrainConfig& cfg,
                const TrainOptions& opts) {
    cfg.validate();
    if (data.empty()) {
        throw DataError("train: corpus is empty");
    }
    if (m.adapter_count() == 0) {
        throw ConfigError("train: model has no adapters attached");
    }
    const auto t0 = std::chrono::steady_clock::now();
    RunReport rep;
    const std::uint64_t total = total_steps(data.size(), cfg);
    if (total > 0) {
        (void)lr_at(0, cfg, total);
    }

    std::vector<std::size_t> lengths;
    for (const auto& e : data) {
        lengths.push_back(e.input_ids.size());
    }
    std::vector<std::uint64_t> sizes;
    for (const model::Linear* l : m.linears()) {
        if (l->adapter) {
            sizes.push_back(l->adapter->A.size());
            sizes.push_back(l->adapter->B.size());
        }
    }
    rep.trainable_params = m.adapter_param_count();
    rep.total_params = m.base_param_count();
    rep.trainable_fraction = static_cast<double>(rep.trainable_params) / static_cast<double>(rep.total_params);
    rep.peak_model_bytes = model::model_storage_bytes(m) + rep.trainable_params * 4;
    rep.peak_optimizer_bytes = optimizer_state_bytes(cfg.optimizer, sizes);

    AdamW opt(cfg.optimizer);
    const auto steps_per_batch = static_cast<std::size_t>(cfg.batch_size / cfg.micro_batch_size);
    double waste_sum = 0.0;
    std::uint64_t step = 0;
    try {
        for (int epoch = 0; epoch < cfg.num_epochs; ++epoch) {
            const Batches micro =
                make_micro_batches(lengths, static_cast<std::size_t>(cfg.batch_size),
                                   static_cast<std::size_t>(cfg.micro_batch_size), cfg.group_by_length,
                                   derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch), 0, "batches"));
            waste_sum += padding_waste(micro, lengths);
            for (std::size_t b = 0; b < micro.size(); b += steps_per_batch) {
                const Batches group(micro.begin() + static_cast<std::ptrdiff_t>(b),
                                    micro.begin() + static_cast<std::ptrdiff_t>(std::min(b + steps_per_batch, micro.size())));
                const double lr = lr_at(step, cfg, total);
                StepGradients sg;
                try {
                    sg = accumulate_gradients(m, data, group, true, cfg.seed, step);
                } catch (const NumericalError& e) {
                    throw NumericalError(std::string(e.what()) + " at step " + std::to_string(step));
                }
                if (sg.targets == 0) {
                    rep.warnings.push_back("step " + std::to_string(step) + " has no loss targets");
                }
                if (!std::isfinite(sg.loss)) {
                    throw NumericalError("non-finite loss at step " + std::to_string(step));
                }
                apply_update(m, opt, sg.grads, lr, cfg.weight_decay);
                rep.peak_activation_bytes_estimate = std::max(rep.peak_activation_bytes_estimate, sg.peak_activation_bytes);
                rep.loss_curve.push_back(sg.loss);
                rep.lr_curve.push_back(lr);
                if (opts.on_step) {
                    opts.on_step(step, sg.loss);
                }
                ++step;
            }
        }
    } catch (const NumericalError& e) {
        std::string msg = e.what();
        if (!opts.failure_checkpoint.empty()) {
            model::adapters_to_checkpoint(m).save(opts.failure_checkpoint);
            msg += "; last good adapters written to " + opts.failure_checkpoint.string();
        }
        throw NumericalError(msg);
    }
    rep.steps = step;
    rep.padding_waste = cfg.num_epochs > 0 ? waste_sum / cfg.num_epochs : 0.0;
    rep.final_loss = evaluate_loss(m, data);
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

std::string RunReport::to_json(bool include_wall_time) const {
    nlohmann::ordered_json j;
    j["steps"] = steps;
    j["trainable_params"] = trainable_params;
    j["total_params"] = total_params;
    j["trainable_fraction"] = trainable_fraction;
    j["trainable"] = format_trainable(trainable_params, trainable_fraction);
    j["peak_model_bytes"] = peak_model_bytes;
    j["peak_optimizer_bytes"] = peak_optimizer_bytes;
    j["peak_activation_bytes_estimate"] = peak_activation_bytes_estimate;
    j["padding_waste"] = padding_waste;
    j["final_loss"] = final_loss;
    if (include_wall_time) {
        j["wall_seconds"] = wall_seconds;
    }
    j["loss_curve"] = loss_curve;
    j["lr_curve"] = lr_curve;
    j["warnings"] = warnings;
    return j.dump(2) + "\n";
}

std::string format_trainable(std::uint64_t params, double fraction) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%llu (%.4f%%)", static_cast<unsigned long long>(params), 100.0 * fraction);
    return buf;
}

}  // namespace qlfg::train
