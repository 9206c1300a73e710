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

#include "qlfg/model.hpp"

namespace qlfg::eval {

struct MCItem {
    std::string context;
    std::vector<std::string> choices;
    int gold = 0;
};

struct MCTask {
    std::string name;
    std::vector<MCItem> items;
};

struct SummItem {
    std::string document;
    std::string reference;
};

struct SummTask {
    std::string name;
    std::vector<SummItem> items;
};

// JSONL: {"context", "choices", "gold"} per line; summarization: {"document", "reference"}.
MCTask parse_mc_task(std::string_view text, const std::string& name);
SummTask parse_summ_task(std::string_view text, const std::string& name);
MCTask load_mc_task(const std::filesystem::path& path);
SummTask load_summ_task(const std::filesystem::path& path);

// What the harness needs from a model.
struct EvalModel {
    std::string id;
    // Mean per-token log-likelihood of `continuation` following `context`.
    std::function<double(const std::string& context, const std::string& continuation)> mean_loglik;
    std::function<std::string(const std::string& prompt)> generate;
};

EvalModel make_eval_model(const model::NanoTransformer& m, std::string id, int max_new_tokens = 48);

struct MCReport {
    double accuracy = 0.0;
    std::vector<std::size_t> sampled;  // item indices, in scoring order
    std::vector<int> predictions;
    std::size_t ties = 0;
};

// Scores a seeded sample of n_examples items. Each choice is scored by its
// mean per-token log-likelihood; ties go to the lowest index.
MCReport score_multiple_choice(const EvalModel& model, const MCTask& task, std::size_t n_examples, std::uint64_t seed);

// Seeded sample of n indices from [0, count).
std::vector<std::size_t> sample_indices(std::size_t count, std::size_t n, std::uint64_t seed);

// Lowercased alphanumeric runs.
std::vector<std::string> rouge_tokens(std::string_view text);
// Clipped bigram-overlap F1; 0 when either text has no bigrams.
double rouge2(std::string_view candidate, std::string_view reference);

// Mean ROUGE-2 of generated summaries over a seeded sample.
double score_summarization(const EvalModel& model, const SummTask& task, std::size_t n_examples, std::uint64_t seed);

// Prompt used to request a summary.
std::string summarization_prompt(const std::string& document);

struct MetricTable {
    std::vector<std::string> models;
    std::vector<std::string> metrics;
    std::vector<bool> higher_is_better;
    // cells[model][metric]; nullopt marks a missing score.
    std::vector<std::vector<std::optional<double>>> cells;

    void add_metric(const std::string& name, bool higher);
    std::size_t add_model(const std::string& id);
    void set(std::size_t model, std::size_t metric, std::optional<double> v);
};

struct WinRates {
    std::map<std::string, double> mean;                       // model -> mean over metrics
    std::map<std::string, std::vector<double>> per_metric;    // model -> per-metric win rates
    std::vector<std::string> excluded;                        // models with a missing cell
};

// Per metric: (models strictly beaten + 0.5 * ties) / (n - 1); averaged over
// metrics. Models with a missing cell are excluded first. Throws ConfigError
// with fewer than two ranked models or no metrics.
WinRates mean_win_rate(const MetricTable& table);

struct SuiteConfig {
    std::size_t n_examples = 50;
    std::uint64_t seed = 0;
};

struct Leaderboard {
    MetricTable table;
    std::optional<WinRates> win_rates;  // absent with fewer than two ranked models
    std::vector<std::string> notes;
    SuiteConfig cfg;

    std::string to_json() const;
    static Leaderboard from_json(std::string_view text);
};

// One column per MC task (accuracy) and per summarization task (rouge2).
Leaderboard run_suite(const std::vector<EvalModel>& models, const std::vector<MCTask>& mc_tasks,
                      const std::vector<SummTask>& summ_tasks, const SuiteConfig& cfg);

// Merges leaderboards (DataError on conflicting scores) and recomputes win rates.
Leaderboard merge_leaderboards(const std::vector<Leaderboard>& boards);
std::string render_markdown(const Leaderboard& lb);

}  // namespace qlfg::eval
