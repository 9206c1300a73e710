// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace qlfg::data {

struct CorpusRecord {
    std::string instruction;
    std::string input;  // empty when absent
    std::string output;
    std::string source_tag;
    std::string license_tag;  // optional
    std::string id;           // "<source_tag>:<line>" when read from JSONL
};

// One JSON object per line with keys instruction, input (optional), output and
// optionally license. Blank lines are skipped. Throws DataError naming the line
// for malformed JSON or an empty instruction/output.
std::vector<CorpusRecord> parse_jsonl(std::string_view text, const std::string& source_tag);
std::vector<CorpusRecord> read_jsonl(const std::filesystem::path& path, const std::string& source_tag);
// Keys in fixed order: instruction, input (if non-empty), output, source, license (if non-empty).
std::string to_jsonl(const std::vector<CorpusRecord>& records);

// Alpaca prompt templates.
extern const std::string_view kAlpacaWithInput;
extern const std::string_view kAlpacaNoInput;

struct Rendered {
    std::string prompt;
    std::string response;
};

// Throws DataError on an empty instruction.
Rendered render_alpaca(const CorpusRecord& rec);
Rendered render_alpaca(std::string_view instruction, std::string_view input, std::string_view output);

inline constexpr std::size_t kEmbeddingDim = 2048;
// FNV-1a offset basis used to hash trigrams.
inline constexpr std::uint64_t kEmbeddingHashSeed = 0xCBF29CE484222325ULL;

struct EmbeddingProvider {
    std::string name;
    std::size_t dim = 0;
    std::function<std::vector<float>(std::string_view)> embed;
};

// Hashed byte-trigram counts in kEmbeddingDim buckets, L2-normalized. Texts of
// one or two bytes hash as a single gram. Empty text gives the zero vector and
// sets *empty_warning.
std::vector<float> embed_default(std::string_view text, bool* empty_warning = nullptr);
EmbeddingProvider default_provider();

// dot(a, b) / (|a| |b|) in fp64; 0 when either norm is 0.
double cosine(const std::vector<float>& a, const std::vector<float>& b);

struct RemovedPair {
    std::size_t removed = 0;  // index into the input
    std::size_t kept = 0;
    double similarity = 0.0;
};

struct DedupResult {
    std::vector<std::size_t> kept;  // input indices, in input order
    std::vector<RemovedPair> removed;
    std::vector<std::string> warnings;
};

// Greedy first-wins scan: an item is dropped iff its cosine similarity with
// some already-kept item is strictly greater than `threshold`. The logged
// partner is the first kept item exceeding the threshold.
DedupResult dedup_embeddings(const std::vector<std::vector<float>>& embeddings, double threshold);

// Text embedded for dedup: instruction, input and output joined by newlines.
// The fixed template wording is left out so it cannot dominate similarity.
std::string dedup_text(const CorpusRecord& rec);

// Embeds dedup_text of every record.
DedupResult dedup(const std::vector<CorpusRecord>& records, const EmbeddingProvider& provider, double threshold);

struct MixComponent {
    std::string tag;
    double fraction = 1.0;                // in (0, 1]
    std::optional<std::uint64_t> cap;     // absolute count instead of a fraction
};

// Text format, one entry per line ('#' comments):
//   seed=<int>
//   dedup_threshold=<real in [0,1]>
//   <tag>=<fraction in (0,1]> | <percent>% | cap:<count>
// Components keep file order.
struct MixPlan {
    std::vector<MixComponent> components;
    std::uint64_t seed = 0;
    double dedup_threshold = 0.9;

    static MixPlan parse(std::string_view text);
    static MixPlan load(const std::filesystem::path& path);
};

// floor(fraction * n), or min(cap, n).
std::size_t component_count(const MixComponent& c, std::size_t n);

struct SourceCounts {
    std::string tag;
    std::size_t available = 0;
    std::size_t sampled = 0;
    std::size_t kept = 0;
    std::size_t removed = 0;
};

struct ComposeResult {
    std::vector<CorpusRecord> records;   // final mix
    std::vector<CorpusRecord> sampled;   // before dedup
    std::vector<SourceCounts> sources;   // plan order
    DedupResult dedup;                   // indices refer to `sampled`
    std::string embedding_name;
};

// Seeded shuffle of each source, take the component's prefix, concatenate in
// plan order, then dedup. Throws ConfigError listing available tags when a
// component names a missing source.
ComposeResult compose(const std::map<std::string, std::vector<CorpusRecord>>& corpora, const MixPlan& plan,
                      const EmbeddingProvider& provider);

// Deterministic JSON manifest: per-source counts and removed pairs.
std::string compose_manifest_json(const ComposeResult& result, const MixPlan& plan);

}  // namespace qlfg::data
