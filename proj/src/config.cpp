// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "qlfg/config.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <string>

#include <openssl/evp.h>

#include "qlfg/errors.hpp"

namespace qlfg::config {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front())) != 0) {
        s.remove_prefix(1);
    }
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back())) != 0) {
        s.remove_suffix(1);
    }
    return s;
}

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

[[noreturn]] void bad(std::string_view key, std::string_view value, std::string_view expected) {
    throw ConfigError("config key '" + std::string(key) + "': invalid value '" + std::string(value) + "' (expected " +
                      std::string(expected) + ")");
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
    T out{};
    const auto* end = v.data() + v.size();
    const auto r = std::from_chars(v.data(), end, out);
    if (r.ec != std::errc() || r.ptr != end) {
        bad(key, v, "a number");
    }
    return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
    const std::string l = lower(v);
    if (l == "true") {
        return true;
    }
    if (l == "false") {
        return false;
    }
    bad(key, v, "true or false");
}

std::string fmt_double(double x) {
    std::array<char, 64> buf{};
    const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), x);
    return {buf.data(), r.ptr};
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

template <typename F>
auto wrap(std::string_view key, std::string_view v, F&& fn) {
    try {
        return fn(std::string(v));
    } catch (const ConfigError& e) {
        throw ConfigError("config key '" + std::string(key) + "': " + e.what());
    }
}

struct Entry {
    const char* key;
    std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define QLFG_INT(KEY, FIELD, TYPE)                                                                   \
    Entry {                                                                                          \
        KEY, [](RunConfig& c, std::string_view k, std::string_view v) { c.FIELD = parse_number<TYPE>(k, v); }, \
            [](const RunConfig& c) { return std::to_string(c.FIELD); }                               \
    }
#define QLFG_REAL(KEY, FIELD)                                                                             \
    Entry {                                                                                               \
        KEY, [](RunConfig& c, std::string_view k, std::string_view v) { c.FIELD = parse_number<double>(k, v); }, \
            [](const RunConfig& c) { return fmt_double(c.FIELD); }                                        \
    }
#define QLFG_BOOL(KEY, FIELD)                                                                      \
    Entry {                                                                                        \
        KEY, [](RunConfig& c, std::string_view k, std::string_view v) { c.FIELD = parse_bool(k, v); }, \
            [](const RunConfig& c) { return fmt_bool(c.FIELD); }                                   \
    }
#define QLFG_TEXT(KEY, FIELD)                                                                   \
    Entry {                                                                                     \
        KEY, [](RunConfig& c, std::string_view, std::string_view v) { c.FIELD = std::string(v); }, \
            [](const RunConfig& c) { return c.FIELD; }                                          \
    }

const std::vector<Entry>& entries() {
    static const std::vector<Entry> table = {
        QLFG_TEXT("quantization_method", quantization_method),
        QLFG_BOOL("load_in_8bit", load_in_8bit),
        QLFG_BOOL("load_in_4bit", load_in_4bit),
        QLFG_REAL("llm_int8_threshold", llm_int8_threshold),
        QLFG_TEXT("llm_int8_skip_modules", llm_int8_skip_modules),
        QLFG_BOOL("llm_int8_enable_fp32_cpu_offload", llm_int8_enable_fp32_cpu_offload),
        QLFG_BOOL("llm_int8_has_fp16_weight", llm_int8_has_fp16_weight),
        QLFG_TEXT("bnb_4bit_quantization_type", bnb_4bit_quantization_type),
        QLFG_BOOL("bnb_4bit_use_double_quantization", bnb_4bit_use_double_quantization),
        Entry{"bnb_4bit_compute_dtype",
              [](RunConfig& c, std::string_view k, std::string_view v) {
                  const std::string l = lower(v);
                  if (l == "bfloat16" || l == "bf16") {
                      c.bnb_4bit_compute_dtype = quant::ComputeWidth::bf16;
                  } else if (l == "float32" || l == "fp32") {
                      c.bnb_4bit_compute_dtype = quant::ComputeWidth::fp32;
                  } else {
                      bad(k, v, "bfloat16 or float32");
                  }
              },
              [](const RunConfig& c) {
                  return std::string(c.bnb_4bit_compute_dtype == quant::ComputeWidth::bf16 ? "bfloat16" : "float32");
              }},
        QLFG_INT("batch_size", train.batch_size, int),
        QLFG_INT("micro_batch_size", train.micro_batch_size, int),
        QLFG_INT("num_epochs", train.num_epochs, int),
        QLFG_REAL("learning_rate", train.learning_rate),
        QLFG_INT("cutoff_len", train.cutoff_len, int),
        QLFG_INT("lora_r", train.lora_r, int),
        QLFG_REAL("lora_alpha", train.lora_alpha),
        QLFG_REAL("lora_dropout", train.lora_dropout),
        Entry{"lora_target_modules",
              [](RunConfig& c, std::string_view k, std::string_view v) {
                  c.train.lora_target_modules = wrap(k, v, [](const std::string& s) { return lora::parse_target_selector(s); });
              },
              [](const RunConfig& c) { return lora::to_string(c.train.lora_target_modules); }},
        QLFG_BOOL("train_on_inputs", train.train_on_inputs),
        QLFG_BOOL("add_eos_token", train.add_eos_token),
        QLFG_BOOL("group_by_length", train.group_by_length),
        QLFG_TEXT("prompt_template", prompt_template),
        Entry{"optimizer",
              [](RunConfig& c, std::string_view k, std::string_view v) {
                  c.train.optimizer = wrap(k, v, [](const std::string& s) { return train::parse_optimizer(s); });
              },
              [](const RunConfig& c) { return train::to_string(c.train.optimizer); }},
        QLFG_TEXT("lr_scheduler", train.lr_scheduler),
        QLFG_REAL("weight_decay", train.weight_decay),
        QLFG_INT("warmup_steps", train.warmup_steps, int),
        QLFG_INT("seed", train.seed, std::uint64_t),
        QLFG_INT("model.n_layers", model.n_layers, int),
        QLFG_INT("model.d_model", model.d_model, int),
        QLFG_INT("model.n_heads", model.n_heads, int),
        QLFG_INT("model.d_ffn", model.d_ffn, int),
        QLFG_INT("model.vocab_size", model.vocab_size, int),
        QLFG_INT("model.max_seq", model.max_seq, int),
        Entry{"model.ffn_kind",
              [](RunConfig& c, std::string_view k, std::string_view v) {
                  c.model.ffn_kind = wrap(k, v, [](const std::string& s) { return model::parse_ffn_kind(s); });
              },
              [](const RunConfig& c) { return model::to_string(c.model.ffn_kind); }},
        Entry{"attention.kernel",
              [](RunConfig& c, std::string_view k, std::string_view v) {
                  c.model.kernel = wrap(k, v, [](const std::string& s) { return attn::parse_kernel(s); });
              },
              [](const RunConfig& c) { return attn::to_string(c.model.kernel); }},
        QLFG_INT("attention.tile_size", model.tile_size, std::size_t),
        QLFG_INT("quant.block_size", block_size, std::size_t),
        QLFG_INT("quant.superblock_size", superblock_size, std::size_t),
        Entry{"quant.c2_codec",
              [](RunConfig& c, std::string_view k, std::string_view v) {
                  c.c2_codec = wrap(k, v, [](const std::string& s) { return quant::parse_c2_codec(s); });
              },
              [](const RunConfig& c) { return quant::to_string(c.c2_codec); }},
    };
    return table;
}

#undef QLFG_INT
#undef QLFG_REAL
#undef QLFG_BOOL
#undef QLFG_TEXT

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
    for (const auto& e : entries()) {
        if (key == e.key) {
            e.set(*this, key, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void RunConfig::validate() const {
    if (lower(quantization_method) != "bitsandbytes") {
        throw ConfigError("quantization_method must be bitsandbytes");
    }
    if (load_in_8bit) {
        throw ConfigError("load_in_8bit=true is not supported; use load_in_4bit");
    }
    if (!load_in_4bit) {
        throw ConfigError("load_in_4bit must be true: adapters train on a 4-bit frozen base");
    }
    if (lower(bnb_4bit_quantization_type) != "nf4") {
        throw ConfigError("bnb_4bit_quantization_type must be nf4");
    }
    if (lower(prompt_template) != "alpaca") {
        throw ConfigError("prompt_template must be alpaca");
    }
    if (lower(train.lr_scheduler) != "cosine") {
        throw ConfigError("lr_scheduler must be cosine");
    }
    if (bnb_4bit_use_double_quantization && c2_codec == quant::C2Codec::fp32) {
        throw ConfigError("quant.c2_codec=fp32 conflicts with bnb_4bit_use_double_quantization=true");
    }
    if (block_size == 0 || superblock_size == 0) {
        throw ConfigError("quant.block_size and quant.superblock_size must be >= 1");
    }
    train.validate();
    model.validate();
    if (train.cutoff_len > model.max_seq) {
        throw ConfigError("cutoff_len (" + std::to_string(train.cutoff_len) + ") exceeds model.max_seq (" +
                          std::to_string(model.max_seq) + ")");
    }
}

quant::PrecisionPolicy RunConfig::policy() const {
    quant::PrecisionPolicy p;
    p.compute_width = bnb_4bit_compute_dtype;
    p.c2_codec = bnb_4bit_use_double_quantization ? c2_codec : quant::C2Codec::fp32;
    return p;
}

std::vector<std::string> RunConfig::keys() {
    std::vector<std::string> out;
    for (const auto& e : entries()) {
        out.emplace_back(e.key);
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::string RunConfig::canonical_text() const {
    std::vector<std::pair<std::string, std::string>> kv;
    for (const auto& e : entries()) {
        kv.emplace_back(e.key, e.get(*this));
    }
    std::sort(kv.begin(), kv.end());
    std::string out;
    for (const auto& [k, v] : kv) {
        out += k + "=" + v + "\n";
    }
    return out;
}

std::string RunConfig::hash() const { return sha256_hex(canonical_text()); }

RunConfig RunConfig::parse(std::string_view text) {
    RunConfig cfg;
    std::size_t pos = 0;
    std::size_t line_no = 0;
    std::set<std::string, std::less<>> seen;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) {
            nl = text.size();
        }
        const std::string_view line = trim(text.substr(pos, nl - pos));
        pos = nl + 1;
        ++line_no;
        if (line.empty() || line.front() == '#') {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
        }
        const std::string_view key = trim(line.substr(0, eq));
        if (!seen.emplace(key).second) {
            throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + std::string(key) + "'");
        }
        cfg.set(key, trim(line.substr(eq + 1)));
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot open config '" + path.string() + "'");
    }
    const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return parse(text);
}

std::string sha256_hex(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[md[i] >> 4]);
        out.push_back(kHex[md[i] & 0xF]);
    }
    return out;
}

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open '" + path.string() + "'");
    }
    const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return sha256_hex(bytes);
}

}  // namespace qlfg::config
