// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <exception>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "qlfg/config.hpp"
#include "qlfg/model.hpp"
#include "qlfg/train.hpp"

namespace qlfg::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumerical = 4;

// Maps an exception to the documented exit code.
int exit_code_for(const std::exception& e);

// Provenance record written next to every artifact as <artifact>.manifest.json.
struct RunManifest {
    std::string command;
    std::string config_hash;  // empty when the command takes no config
    std::map<std::string, std::uint64_t> seeds;
    std::vector<std::filesystem::path> inputs;
    std::vector<std::filesystem::path> outputs;
    std::string started;   // ISO-8601 UTC
    std::string finished;  // ISO-8601 UTC
    double wall_seconds = 0.0;

    // Inputs and outputs are listed with their SHA-256. Timestamps are the
    // only fields that vary between identical runs.
    std::string to_json() const;
    void write(const std::filesystem::path& artifact) const;
};

std::filesystem::path manifest_path(const std::filesystem::path& artifact);

// Thread count from --threads, else QLFG_THREADS, else 0 (runtime default).
int resolve_threads(int flag_value);

// Seeded base model, frozen to NF4 under the config's policy, with adapters attached.
model::NanoTransformer prepare_model(const config::RunConfig& cfg);

// Alpaca-rendered, tokenized training examples from a JSONL corpus.
train::TokenizedCorpus load_examples(const std::filesystem::path& path, const config::RunConfig& cfg);

// Entry point: qlfg <curate|train|eval|ablate|report> [options].
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace qlfg::cli
