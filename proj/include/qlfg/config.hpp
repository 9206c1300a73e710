// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "qlfg/model.hpp"
#include "qlfg/quantize.hpp"
#include "qlfg/train.hpp"

namespace qlfg::config {

// A run configuration read from UTF-8 key=value lines. Blank lines and lines
// starting with '#' are ignored. Keys are the quantization and fine-tuning
// hyperparameter names, lowercased with spaces replaced by underscores, plus
// seed, model.*, attention.* and quant.* extensions.
struct RunConfig {
    RunConfig() { model.max_seq = train.cutoff_len; }

    // Quantization.
    std::string quantization_method = "bitsandbytes";
    bool load_in_8bit = false;
    bool load_in_4bit = true;
    double llm_int8_threshold = 6.0;  // accepted; no 8-bit path
    std::string llm_int8_skip_modules = "None";
    bool llm_int8_enable_fp32_cpu_offload = false;
    bool llm_int8_has_fp16_weight = false;
    std::string bnb_4bit_quantization_type = "nf4";
    bool bnb_4bit_use_double_quantization = true;
    quant::ComputeWidth bnb_4bit_compute_dtype = quant::ComputeWidth::bf16;

    // Fine-tuning.
    train::TrainConfig train;
    std::string prompt_template = "alpaca";

    // Extensions.
    model::NanoTransformerConfig model;
    std::size_t block_size = quant::kDefaultBlockSize;
    std::size_t superblock_size = quant::kDefaultSuperblockSize;
    quant::C2Codec c2_codec = quant::C2Codec::affine8;

    // Throws ConfigError naming the key for an unknown key or bad value.
    void set(std::string_view key, std::string_view value);
    // Throws ConfigError.
    void validate() const;

    // Effective weight policy: fp32 c2 when double quantization is off.
    quant::PrecisionPolicy policy() const;

    // Every key with its effective value, sorted by key, one key=value per line.
    std::string canonical_text() const;
    // Lowercase hex SHA-256 of canonical_text().
    std::string hash() const;

    static std::vector<std::string> keys();
    static RunConfig parse(std::string_view text);
    static RunConfig load(const std::filesystem::path& path);
};

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace qlfg::config
