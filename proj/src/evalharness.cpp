// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "qlfg/evalharness.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>

#include <json.hpp>

#include "qlfg/datapipe.hpp"
#include "qlfg/errors.hpp"
#include "qlfg/rng.hpp"
#include "qlfg/tokenizer.hpp"

namespace qlfg::eval {

namespace {

using json = nlohmann::ordered_json;

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open '" + path.string() + "'");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename F>
void for_each_json_line(std::string_view text, const std::string& name, F&& fn) {
    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) {
            nl = text.size();
        }
        const std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
            continue;
        }
        const std::string where = name + " line " + std::to_string(line_no);
        try {
            fn(json::parse(line), where);
        } catch (const json::exception& e) {
            throw DataError(where + ": " + e.what());
        }
    }
}

std::string stem(const std::filesystem::path& p) { return p.stem().string(); }

}  // namespace

MCTask parse_mc_task(std::string_view text, const std::string& name) {
    MCTask task;
    task.name = name;
    for_each_json_line(text, name, [&](const json& j, const std::string& where) {
        MCItem it;
        it.context = j.at("context").get<std::string>();
        it.choices = j.at("choices").get<std::vector<std::string>>();
        it.gold = j.at("gold").get<int>();
        if (it.choices.size() < 2) {
            throw DataError(where + ": fewer than two choices");
        }
        if (it.gold < 0 || static_cast<std::size_t>(it.gold) >= it.choices.size()) {
            throw DataError(where + ": gold index out of range");
        }
        task.items.push_back(std::move(it));
    });
    return task;
}

SummTask parse_summ_task(std::string_view text, const std::string& name) {
    SummTask task;
    task.name = name;
    for_each_json_line(text, name, [&](const json& j, const std::string&) {
        task.items.push_back({j.at("document").get<std::string>(), j.at("reference").get<std::string>()});
    });
    return task;
}

MCTask load_mc_task(const std::filesystem::path& path) { return parse_mc_task(read_file(path), stem(path)); }

SummTask load_summ_task(const std::filesystem::path& path) { return parse_summ_task(read_file(path), stem(path)); }

EvalModel make_eval_model(const model::NanoTransformer& m, std::string id, int max_new_tokens) {
    EvalModel em;
    em.id = std::move(id);
    const model::NanoTransformer* mp = &m;
    em.mean_loglik = [mp](const std::string& context, const std::string& continuation) {
        if (continuation.empty()) {
            throw DataError("empty continuation");
        }
        std::vector<int> ctx{model::ByteTokenizer::kBos};
        const auto c = model::ByteTokenizer::encode(context);
        ctx.insert(ctx.end(), c.begin(), c.end());
        const auto cont = model::ByteTokenizer::encode(continuation);
        const auto max_seq = static_cast<std::size_t>(mp->cfg.max_seq);
        if (cont.size() + 1 > max_seq) {
            throw DataError("continuation longer than the model context");
        }
        if (ctx.size() + cont.size() > max_seq) {
            ctx.erase(ctx.begin(), ctx.begin() + static_cast<std::ptrdiff_t>(ctx.size() + cont.size() - max_seq));
        }
        std::vector<int> all = ctx;
        all.insert(all.end(), cont.begin(), cont.end());
        const auto lp = model::token_logprobs(*mp, all);
        double sum = 0.0;
        for (std::size_t i = lp.size() - cont.size(); i < lp.size(); ++i) {
            sum += lp[i];
        }
        return sum / static_cast<double>(cont.size());
    };
    em.generate = [mp, max_new_tokens](const std::string& prompt) {
        std::vector<int> ids{model::ByteTokenizer::kBos};
        const auto p = model::ByteTokenizer::encode(prompt);
        ids.insert(ids.end(), p.begin(), p.end());
        const auto limit = static_cast<std::size_t>(std::max(1, mp->cfg.max_seq - max_new_tokens));
        if (ids.size() > limit) {
            ids.erase(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(ids.size() - limit));
        }
        return model::ByteTokenizer::decode(model::generate_greedy(*mp, ids, max_new_tokens));
    };
    return em;
}

std::vector<std::size_t> sample_indices(std::size_t count, std::size_t n, std::uint64_t seed) {
    if (n == 0) {
        throw ConfigError("n_examples must be >= 1");
    }
    if (n > count) {
        throw ConfigError("n_examples (" + std::to_string(n) + ") exceeds task size (" + std::to_string(count) + ")");
    }
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(idx);
    idx.resize(n);
    return idx;
}

MCReport score_multiple_choice(const EvalModel& model, const MCTask& task, std::size_t n_examples, std::uint64_t seed) {
    MCReport rep;
    rep.sampled = sample_indices(task.items.size(), n_examples, seed);
    std::size_t correct = 0;
    for (auto i : rep.sampled) {
        const auto& it = task.items[i];
        int best = 0;
        double best_score = -std::numeric_limits<double>::infinity();
        bool tie = false;
        for (std::size_t c = 0; c < it.choices.size(); ++c) {
            const double s = model.mean_loglik(it.context, it.choices[c]);
            if (s > best_score) {
                best_score = s;
                best = static_cast<int>(c);
                tie = false;
            } else if (s == best_score) {
                tie = true;
            }
        }
        rep.ties += tie ? 1 : 0;
        rep.predictions.push_back(best);
        correct += best == it.gold ? 1 : 0;
    }
    rep.accuracy = static_cast<double>(correct) / static_cast<double>(rep.sampled.size());
    return rep;
}

std::vector<std::string> rouge_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c) != 0) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) {
        out.push_back(std::move(cur));
    }
    return out;
}

double rouge2(std::string_view candidate, std::string_view reference) {
    auto bigrams = [](const std::vector<std::string>& t) {
        std::map<std::pair<std::string, std::string>, std::size_t> m;
        for (std::size_t i = 0; i + 1 < t.size(); ++i) {
            ++m[{t[i], t[i + 1]}];
        }
        return m;
    };
    const auto ct = rouge_tokens(candidate);
    const auto rt = rouge_tokens(reference);
    if (ct.size() < 2 || rt.size() < 2) {
        return 0.0;
    }
    const auto cb = bigrams(ct);
    const auto rb = bigrams(rt);
    std::size_t overlap = 0;
    for (const auto& [bg, n] : cb) {
        auto it = rb.find(bg);
        if (it != rb.end()) {
            overlap += std::min(n, it->second);
        }
    }
    if (overlap == 0) {
        return 0.0;
    }
    const double p = static_cast<double>(overlap) / static_cast<double>(ct.size() - 1);
    const double r = static_cast<double>(overlap) / static_cast<double>(rt.size() - 1);
    return 2.0 * p * r / (p + r);
}

std::string summarization_prompt(const std::string& document) {
    return data::render_alpaca("Summarize the following article.", document, "").prompt;
}

double score_summarization(const EvalModel& model, const SummTask& task, std::size_t n_examples, std::uint64_t seed) {
    const auto idx = sample_indices(task.items.size(), n_examples, seed);
    double sum = 0.0;
    for (auto i : idx) {
        sum += rouge2(model.generate(summarization_prompt(task.items[i].document)), task.items[i].reference);
    }
    return sum / static_cast<double>(idx.size());
}

void MetricTable::add_metric(const std::string& name, bool higher) {
    metrics.push_back(name);
    higher_is_better.push_back(higher);
    for (auto& row : cells) {
        row.emplace_back();
    }
}

std::size_t MetricTable::add_model(const std::string& id) {
    models.push_back(id);
    cells.emplace_back(metrics.size());
    return models.size() - 1;
}

void MetricTable::set(std::size_t model, std::size_t metric, std::optional<double> v) { cells.at(model).at(metric) = v; }

WinRates mean_win_rate(const MetricTable& table) {
    if (table.metrics.empty()) {
        throw ConfigError("mean_win_rate: no metrics");
    }
    WinRates wr;
    std::vector<std::size_t> ranked;
    for (std::size_t m = 0; m < table.models.size(); ++m) {
        bool complete = true;
        for (const auto& c : table.cells[m]) {
            complete = complete && c.has_value() && std::isfinite(*c);
        }
        if (complete) {
            ranked.push_back(m);
        } else {
            wr.excluded.push_back(table.models[m]);
        }
    }
    if (ranked.size() < 2) {
        throw ConfigError("mean_win_rate: need at least two models with complete scores");
    }
    const double denom = static_cast<double>(ranked.size() - 1);
    for (auto m : ranked) {
        std::vector<double> per;
        for (std::size_t k = 0; k < table.metrics.size(); ++k) {
            const double mine = *table.cells[m][k];
            double wins = 0.0;
            for (auto o : ranked) {
                if (o == m) {
                    continue;
                }
                const double other = *table.cells[o][k];
                const bool better = table.higher_is_better[k] ? mine > other : mine < other;
                if (better) {
                    wins += 1.0;
                } else if (mine == other) {
                    wins += 0.5;
                }
            }
            per.push_back(wins / denom);
        }
        wr.mean[table.models[m]] = std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(per.size());
        wr.per_metric[table.models[m]] = std::move(per);
    }
    return wr;
}

namespace {

void finalize(Leaderboard& lb) {
    std::size_t complete = 0;
    for (const auto& row : lb.table.cells) {
        complete += std::all_of(row.begin(), row.end(), [](const auto& c) { return c.has_value(); }) ? 1 : 0;
    }
    if (!lb.table.metrics.empty() && complete >= 2) {
        lb.win_rates = mean_win_rate(lb.table);
        for (const auto& e : lb.win_rates->excluded) {
            lb.notes.push_back("model '" + e + "' excluded from ranking: missing score");
        }
    } else {
        lb.win_rates.reset();
        lb.notes.push_back("mean win rate undefined: fewer than two models with complete scores");
    }
}

bool derived_note(const std::string& n) {
    return n.rfind("mean win rate undefined", 0) == 0 || n.find("excluded from ranking") != std::string::npos;
}

}  // namespace

Leaderboard run_suite(const std::vector<EvalModel>& models, const std::vector<MCTask>& mc_tasks,
                      const std::vector<SummTask>& summ_tasks, const SuiteConfig& cfg) {
    Leaderboard lb;
    lb.cfg = cfg;
    for (const auto& t : mc_tasks) {
        lb.table.add_metric(t.name + ".accuracy", true);
    }
    for (const auto& t : summ_tasks) {
        lb.table.add_metric(t.name + ".rouge2", true);
    }
    for (const auto& m : models) {
        const std::size_t row = lb.table.add_model(m.id);
        std::size_t col = 0;
        for (const auto& t : mc_tasks) {
            try {
                lb.table.set(row, col, score_multiple_choice(m, t, std::min(cfg.n_examples, t.items.size()), cfg.seed).accuracy);
            } catch (const std::exception& e) {
                lb.notes.push_back("model '" + m.id + "' failed on '" + t.name + "': " + e.what());
            }
            ++col;
        }
        for (const auto& t : summ_tasks) {
            try {
                lb.table.set(row, col, score_summarization(m, t, std::min(cfg.n_examples, t.items.size()), cfg.seed));
            } catch (const std::exception& e) {
                lb.notes.push_back("model '" + m.id + "' failed on '" + t.name + "': " + e.what());
            }
            ++col;
        }
    }
    finalize(lb);
    return lb;
}

std::string Leaderboard::to_json() const {
    json j;
    j["n_examples"] = cfg.n_examples;
    j["seed"] = cfg.seed;
    json metrics = json::array();
    for (std::size_t k = 0; k < table.metrics.size(); ++k) {
        metrics.push_back({{"name", table.metrics[k]}, {"higher_is_better", static_cast<bool>(table.higher_is_better[k])}});
    }
    j["metrics"] = metrics;
    json models = json::array();
    for (std::size_t m = 0; m < table.models.size(); ++m) {
        json e;
        e["id"] = table.models[m];
        json scores = json::object();
        for (std::size_t k = 0; k < table.metrics.size(); ++k) {
            const auto& c = table.cells[m][k];
            scores[table.metrics[k]] = c ? json(*c) : json(nullptr);
        }
        e["scores"] = scores;
        if (win_rates && win_rates->mean.count(table.models[m]) != 0) {
            e["mean_win_rate"] = win_rates->mean.at(table.models[m]);
        }
        models.push_back(e);
    }
    j["models"] = models;
    j["excluded"] = win_rates ? win_rates->excluded : std::vector<std::string>{};
    j["notes"] = notes;
    return j.dump(2) + "\n";
}

Leaderboard Leaderboard::from_json(std::string_view text) {
    Leaderboard lb;
    try {
        const json j = json::parse(text);
        lb.cfg.n_examples = j.at("n_examples").get<std::size_t>();
        lb.cfg.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& m : j.at("metrics")) {
            lb.table.add_metric(m.at("name").get<std::string>(), m.at("higher_is_better").get<bool>());
        }
        for (const auto& m : j.at("models")) {
            const std::size_t row = lb.table.add_model(m.at("id").get<std::string>());
            const auto& scores = m.at("scores");
            for (std::size_t k = 0; k < lb.table.metrics.size(); ++k) {
                const auto& v = scores.at(lb.table.metrics[k]);
                if (!v.is_null()) {
                    lb.table.set(row, k, v.get<double>());
                }
            }
        }
        if (j.contains("notes")) {
            for (const auto& n : j.at("notes").get<std::vector<std::string>>()) {
                if (!derived_note(n)) {
                    lb.notes.push_back(n);
                }
            }
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed leaderboard JSON: ") + e.what());
    }
    finalize(lb);
    return lb;
}

Leaderboard merge_leaderboards(const std::vector<Leaderboard>& boards) {
    Leaderboard out;
    if (boards.empty()) {
        throw ConfigError("no leaderboards to merge");
    }
    out.cfg = boards.front().cfg;
    for (const auto& b : boards) {
        for (std::size_t k = 0; k < b.table.metrics.size(); ++k) {
            const auto it = std::find(out.table.metrics.begin(), out.table.metrics.end(), b.table.metrics[k]);
            if (it == out.table.metrics.end()) {
                out.table.add_metric(b.table.metrics[k], b.table.higher_is_better[k]);
            } else if (out.table.higher_is_better[static_cast<std::size_t>(it - out.table.metrics.begin())] !=
                       b.table.higher_is_better[k]) {
                throw DataError("metric '" + b.table.metrics[k] + "' has conflicting directions");
            }
        }
    }
    for (const auto& b : boards) {
        for (std::size_t m = 0; m < b.table.models.size(); ++m) {
            const auto mit = std::find(out.table.models.begin(), out.table.models.end(), b.table.models[m]);
            const std::size_t row = mit == out.table.models.end()
                                        ? out.table.add_model(b.table.models[m])
                                        : static_cast<std::size_t>(mit - out.table.models.begin());
            for (std::size_t k = 0; k < b.table.metrics.size(); ++k) {
                const auto& v = b.table.cells[m][k];
                if (!v) {
                    continue;
                }
                const auto col = static_cast<std::size_t>(
                    std::find(out.table.metrics.begin(), out.table.metrics.end(), b.table.metrics[k]) -
                    out.table.metrics.begin());
                auto& cell = out.table.cells[row][col];
                if (cell && *cell != *v) {
                    throw DataError("conflicting scores for model '" + b.table.models[m] + "' on '" +
                                    b.table.metrics[k] + "'");
                }
                cell = v;
            }
        }
        for (const auto& n : b.notes) {
            if (std::find(out.notes.begin(), out.notes.end(), n) == out.notes.end() && !derived_note(n)) {
                out.notes.push_back(n);
            }
        }
    }
    finalize(out);
    return out;
}

std::string render_markdown(const Leaderboard& lb) {
    auto num = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.4f", v);
        return std::string(buf);
    };
    std::string out = "# Benchmark results\n\n";
    out += "Examples per task: " + std::to_string(lb.cfg.n_examples) + ", seed: " + std::to_string(lb.cfg.seed) + "\n\n";
    out += "| Model |";
    for (const auto& m : lb.table.metrics) {
        out += " " + m + " |";
    }
    out += " Mean win rate |\n|---|";
    for (std::size_t k = 0; k < lb.table.metrics.size(); ++k) {
        out += "---:|";
    }
    out += "---:|\n";
    for (std::size_t m = 0; m < lb.table.models.size(); ++m) {
        out += "| " + lb.table.models[m] + " |";
        for (const auto& c : lb.table.cells[m]) {
            out += " " + (c ? num(*c) : std::string("NULL")) + " |";
        }
        const bool has = lb.win_rates && lb.win_rates->mean.count(lb.table.models[m]) != 0;
        out += " " + (has ? num(lb.win_rates->mean.at(lb.table.models[m])) : std::string("-")) + " |\n";
    }
    if (!lb.notes.empty()) {
        out += "\nNotes:\n\n";
        for (const auto& n : lb.notes) {
            out += "- " + n + "\n";
        }
    }
    return out;
}

}  // namespace qlfg::eval
