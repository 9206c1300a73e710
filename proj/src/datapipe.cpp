// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "qlfg/datapipe.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "qlfg/errors.hpp"
#include "qlfg/rng.hpp"

namespace qlfg::data {

namespace {

using json = nlohmann::ordered_json;

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open '" + path.string() + "'");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<CorpusRecord> parse_jsonl(std::string_view text, const std::string& source_tag) {
    std::vector<CorpusRecord> out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) {
            nl = text.size();
        }
        const std::string_view line = trim(text.substr(pos, nl - pos));
        ++line_no;
        pos = nl + 1;
        if (line.empty()) {
            continue;
        }
        const std::string where = source_tag + " line " + std::to_string(line_no);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw DataError(where + ": malformed JSON (" + e.what() + ")");
        }
        if (!j.is_object()) {
            throw DataError(where + ": expected a JSON object");
        }
        auto field = [&](const char* key, bool required) -> std::string {
            if (!j.contains(key) || j[key].is_null()) {
                if (required) {
                    throw DataError(where + ": missing '" + key + "'");
                }
                return {};
            }
            if (!j[key].is_string()) {
                throw DataError(where + ": '" + key + "' is not a string");
            }
            return j[key].get<std::string>();
        };
        CorpusRecord r;
        r.instruction = field("instruction", true);
        r.input = field("input", false);
        r.output = field("output", true);
        r.license_tag = field("license", false);
        r.source_tag = source_tag;
        r.id = source_tag + ":" + std::to_string(line_no);
        if (trim(r.instruction).empty()) {
            throw DataError(where + ": empty instruction");
        }
        if (trim(r.output).empty()) {
            throw DataError(where + ": empty output");
        }
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<CorpusRecord> read_jsonl(const std::filesystem::path& path, const std::string& source_tag) {
    return parse_jsonl(read_file(path), source_tag);
}

std::string to_jsonl(const std::vector<CorpusRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        json j;
        j["instruction"] = r.instruction;
        if (!r.input.empty()) {
            j["input"] = r.input;
        }
        j["output"] = r.output;
        j["source"] = r.source_tag;
        if (!r.license_tag.empty()) {
            j["license"] = r.license_tag;
        }
        out += j.dump();
        out += '\n';
    }
    return out;
}

const std::string_view kAlpacaWithInput =
    "Below is an instruction that describes a task, paired with an input that provides further context. "
    "Write a response that appropriately completes the request.\n\n"
    "### Instruction:\n{instruction}\n\n### Input:\n{input}\n\n### Response:\n";

const std::string_view kAlpacaNoInput =
    "Below is an instruction that describes a task. "
    "Write a response that appropriately completes the request.\n\n"
    "### Instruction:\n{instruction}\n\n### Response:\n";

namespace {

std::string fill(std::string_view tmpl, std::string_view instruction, std::string_view input) {
    std::string out;
    std::size_t pos = 0;
    while (pos < tmpl.size()) {
        const auto open = tmpl.find('{', pos);
        if (open == std::string_view::npos) {
            out.append(tmpl.substr(pos));
            break;
        }
        out.append(tmpl.substr(pos, open - pos));
        const auto close = tmpl.find('}', open);
        const auto key = tmpl.substr(open + 1, close - open - 1);
        out.append(key == "instruction" ? instruction : input);
        pos = close + 1;
    }
    return out;
}

}  // namespace

Rendered render_alpaca(std::string_view instruction, std::string_view input, std::string_view output) {
    if (trim(instruction).empty()) {
        throw DataError("render_alpaca: empty instruction");
    }
    Rendered r;
    r.prompt = input.empty() ? fill(kAlpacaNoInput, instruction, input) : fill(kAlpacaWithInput, instruction, input);
    r.response = std::string(output);
    return r;
}

Rendered render_alpaca(const CorpusRecord& rec) { return render_alpaca(rec.instruction, rec.input, rec.output); }

std::vector<float> embed_default(std::string_view text, bool* empty_warning) {
    std::vector<float> v(kEmbeddingDim, 0.0f);
    if (empty_warning != nullptr) {
        *empty_warning = text.empty();
    }
    if (text.empty()) {
        return v;
    }
    if (text.size() < 3) {
        v[fnv1a64(text, kEmbeddingHashSeed) % kEmbeddingDim] = 1.0f;
        return v;
    }
    std::vector<std::uint32_t> counts(kEmbeddingDim, 0);
    for (std::size_t i = 0; i + 3 <= text.size(); ++i) {
        ++counts[fnv1a64(text.substr(i, 3), kEmbeddingHashSeed) % kEmbeddingDim];
    }
    double ss = 0.0;
    for (auto c : counts) {
        ss += static_cast<double>(c) * c;
    }
    const double inv = 1.0 / std::sqrt(ss);
    for (std::size_t i = 0; i < kEmbeddingDim; ++i) {
        v[i] = static_cast<float>(counts[i] * inv);
    }
    return v;
}

EmbeddingProvider default_provider() {
    return {"hashed-trigram-2048", kEmbeddingDim, [](std::string_view t) { return embed_default(t); }};
}

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) {
        throw DimensionError("cosine: vectors of different length");
    }
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) {
        return 0.0;
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

DedupResult dedup_embeddings(const std::vector<std::vector<float>>& embeddings, double threshold) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) {
        throw ConfigError("dedup threshold must lie in [0, 1]");
    }
    DedupResult res;
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
        bool zero = true;
        for (float x : embeddings[i]) {
            if (x != 0.0f) {
                zero = false;
                break;
            }
        }
        if (zero) {
            res.warnings.push_back("item " + std::to_string(i) + " has a zero-norm embedding; kept");
            res.kept.push_back(i);
            continue;
        }
        bool dropped = false;
        for (std::size_t k : res.kept) {
            const double sim = cosine(embeddings[i], embeddings[k]);
            if (sim > threshold) {
                res.removed.push_back({i, k, sim});
                dropped = true;
                break;
            }
        }
        if (!dropped) {
            res.kept.push_back(i);
        }
    }
    return res;
}

std::string dedup_text(const CorpusRecord& rec) {
    if (trim(rec.instruction).empty()) {
        throw DataError("dedup: empty instruction");
    }
    return rec.instruction + "\n" + rec.input + "\n" + rec.output;
}

DedupResult dedup(const std::vector<CorpusRecord>& records, const EmbeddingProvider& provider, double threshold) {
    std::vector<std::vector<float>> emb(records.size());
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < records.size(); ++i) {
        emb[i] = provider.embed(dedup_text(records[i]));
    }
    return dedup_embeddings(emb, threshold);
}

namespace {

double parse_double(std::string_view s, const std::string& what) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
        throw ConfigError(what + ": not a number: '" + std::string(s) + "'");
    }
    return v;
}

std::uint64_t parse_u64(std::string_view s, const std::string& what) {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
        throw ConfigError(what + ": not a non-negative integer: '" + std::string(s) + "'");
    }
    return v;
}

}  // namespace

MixPlan MixPlan::parse(std::string_view text) {
    MixPlan plan;
    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) {
            nl = text.size();
        }
        std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const std::string where = "mix plan line " + std::to_string(line_no);
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError(where + ": expected key=value");
        }
        const std::string key(trim(line.substr(0, eq)));
        const std::string_view value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError(where + ": empty key");
        }
        if (key == "seed") {
            plan.seed = parse_u64(value, where);
        } else if (key == "dedup_threshold") {
            plan.dedup_threshold = parse_double(value, where);
            if (!(plan.dedup_threshold >= 0.0 && plan.dedup_threshold <= 1.0)) {
                throw ConfigError(where + ": dedup_threshold must lie in [0, 1]");
            }
        } else {
            for (const auto& c : plan.components) {
                if (c.tag == key) {
                    throw ConfigError(where + ": source '" + key + "' listed twice");
                }
            }
            MixComponent c;
            c.tag = key;
            if (value.starts_with("cap:")) {
                c.cap = parse_u64(value.substr(4), where);
            } else if (value.ends_with('%')) {
                c.fraction = parse_double(value.substr(0, value.size() - 1), where) / 100.0;
            } else {
                c.fraction = parse_double(value, where);
            }
            if (!c.cap && !(c.fraction > 0.0 && c.fraction <= 1.0)) {
                throw ConfigError(where + ": fraction for '" + key + "' must lie in (0, 1]");
            }
            plan.components.push_back(std::move(c));
        }
    }
    if (plan.components.empty()) {
        throw ConfigError("mix plan lists no sources");
    }
    return plan;
}

MixPlan MixPlan::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot open mix plan '" + path.string() + "'");
    }
    const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return parse(text);
}

std::size_t component_count(const MixComponent& c, std::size_t n) {
    if (c.cap) {
        return static_cast<std::size_t>(std::min<std::uint64_t>(*c.cap, n));
    }
    // 0.29 * 100 must give 29.
    const auto k = static_cast<std::size_t>(std::floor(c.fraction * static_cast<double>(n) + 1e-9));
    return std::min(k, n);
}

ComposeResult compose(const std::map<std::string, std::vector<CorpusRecord>>& corpora, const MixPlan& plan,
                      const EmbeddingProvider& provider) {
    for (const auto& c : plan.components) {
        if (corpora.count(c.tag) == 0) {
            std::string avail;
            for (const auto& [tag, recs] : corpora) {
                avail += (avail.empty() ? "" : ", ") + tag;
            }
            throw ConfigError("mix plan references unknown source '" + c.tag + "'; available: " +
                              (avail.empty() ? "(none)" : avail));
        }
    }
    ComposeResult res;
    res.embedding_name = provider.name;
    std::vector<std::size_t> owner;
    for (std::size_t ci = 0; ci < plan.components.size(); ++ci) {
        const auto& c = plan.components[ci];
        const auto& recs = corpora.at(c.tag);
        std::vector<std::size_t> idx(recs.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            idx[i] = i;
        }
        Rng rng(derive_seed(plan.seed, 0, ci, c.tag));
        rng.shuffle(idx);
        const std::size_t take = component_count(c, recs.size());
        SourceCounts sc;
        sc.tag = c.tag;
        sc.available = recs.size();
        sc.sampled = take;
        for (std::size_t i = 0; i < take; ++i) {
            res.sampled.push_back(recs[idx[i]]);
            owner.push_back(res.sources.size());
        }
        res.sources.push_back(sc);
    }
    res.dedup = dedup(res.sampled, provider, plan.dedup_threshold);
    for (std::size_t k : res.dedup.kept) {
        res.records.push_back(res.sampled[k]);
        ++res.sources[owner[k]].kept;
    }
    for (const auto& rp : res.dedup.removed) {
        ++res.sources[owner[rp.removed]].removed;
    }
    return res;
}

std::string compose_manifest_json(const ComposeResult& result, const MixPlan& plan) {
    json j;
    json comps = json::array();
    for (const auto& c : plan.components) {
        json e;
        e["tag"] = c.tag;
        if (c.cap) {
            e["cap"] = *c.cap;
        } else {
            e["fraction"] = c.fraction;
        }
        comps.push_back(e);
    }
    j["plan"] = {{"seed", plan.seed}, {"dedup_threshold", plan.dedup_threshold}, {"components", comps}};
    j["embedding"] = result.embedding_name;
    json sources = json::array();
    for (const auto& s : result.sources) {
        sources.push_back({{"tag", s.tag},
                           {"available", s.available},
                           {"sampled", s.sampled},
                           {"kept", s.kept},
                           {"removed", s.removed}});
    }
    j["sources"] = sources;
    j["total_sampled"] = result.sampled.size();
    j["total_kept"] = result.records.size();
    json pairs = json::array();
    for (const auto& rp : result.dedup.removed) {
        pairs.push_back({{"removed_id", result.sampled[rp.removed].id},
                         {"kept_id", result.sampled[rp.kept].id},
                         {"similarity", rp.similarity}});
    }
    j["removed_pairs"] = pairs;
    j["warnings"] = result.dedup.warnings;
    return j.dump(2) + "\n";
}

}  // namespace qlfg::data
