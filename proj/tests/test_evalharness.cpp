// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "qlfg/errors.hpp"
#include "qlfg/evalharness.hpp"
#include "qlfg/rng.hpp"
#include "tiny_model.hpp"

namespace {

using qlfg::eval::EvalModel;
using qlfg::eval::MCTask;
using qlfg::eval::MetricTable;

MCTask synthetic_mc(std::size_t n, std::uint64_t seed) {
    MCTask t;
    t.name = "synth";
    qlfg::Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        qlfg::eval::MCItem it;
        it.context = "question " + std::to_string(i);
        for (int c = 0; c < 4; ++c) {
            it.choices.push_back("choice " + std::to_string(i) + "-" + std::to_string(c));
        }
        it.gold = static_cast<int>(rng.next_u64() % 4);
        t.items.push_back(it);
    }
    return t;
}

EvalModel oracle_model(const MCTask& task) {
    EvalModel m;
    m.id = "oracle";
    m.mean_loglik = [&task](const std::string& ctx, const std::string& cont) {
        for (const auto& it : task.items) {
            if (it.context == ctx) {
                return it.choices[static_cast<std::size_t>(it.gold)] == cont ? 0.0 : -1e9;
            }
        }
        return -1e9;
    };
    m.generate = [](const std::string&) { return std::string("x"); };
    return m;
}

EvalModel uniform_model(std::string id = "uniform") {
    EvalModel m;
    m.id = std::move(id);
    m.mean_loglik = [](const std::string&, const std::string&) { return -std::log(259.0); };
    m.generate = [](const std::string&) { return std::string(); };
    return m;
}

TEST(MultipleChoice, OracleScoresOne) {
    const auto task = synthetic_mc(80, 1);
    const auto rep = qlfg::eval::score_multiple_choice(oracle_model(task), task, 50, 7);
    EXPECT_EQ(rep.accuracy, 1.0);
    EXPECT_EQ(rep.sampled.size(), 50u);
    EXPECT_EQ(std::set<std::size_t>(rep.sampled.begin(), rep.sampled.end()).size(), 50u);
    EXPECT_EQ(rep.ties, 0u);
}

TEST(MultipleChoice, UniformModelWithinBinomialInterval) {
    const auto task = synthetic_mc(200, 2);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto rep = qlfg::eval::score_multiple_choice(uniform_model(), task, 50, seed);
        EXPECT_GE(rep.accuracy, 0.09);
        EXPECT_LE(rep.accuracy, 0.43);
        // Every item ties; the lowest index wins.
        EXPECT_EQ(rep.ties, 50u);
        for (int p : rep.predictions) {
            EXPECT_EQ(p, 0);
        }
    }
}

TEST(MultipleChoice, RejectsBadCounts) {
    const auto task = synthetic_mc(10, 3);
    EXPECT_THROW(qlfg::eval::score_multiple_choice(uniform_model(), task, 0, 1), qlfg::ConfigError);
    EXPECT_THROW(qlfg::eval::score_multiple_choice(uniform_model(), task, 11, 1), qlfg::ConfigError);
}

TEST(MultipleChoice, ChoiceOrderDoesNotMatterWithoutTies) {
    auto task = synthetic_mc(30, 4);
    // Scores depend on the choice text only.
    EvalModel m;
    m.id = "hash";
    m.mean_loglik = [](const std::string&, const std::string& c) {
        return -static_cast<double>(std::hash<std::string>{}(c) % 100003);
    };
    const auto a = qlfg::eval::score_multiple_choice(m, task, 30, 1);
    for (auto& it : task.items) {
        const std::string gold = it.choices[static_cast<std::size_t>(it.gold)];
        std::reverse(it.choices.begin(), it.choices.end());
        it.gold = static_cast<int>(std::find(it.choices.begin(), it.choices.end(), gold) - it.choices.begin());
    }
    const auto b = qlfg::eval::score_multiple_choice(m, task, 30, 1);
    EXPECT_EQ(a.accuracy, b.accuracy);
}

TEST(MultipleChoice, SamplingIsSeeded) {
    EXPECT_EQ(qlfg::eval::sample_indices(100, 50, 3), qlfg::eval::sample_indices(100, 50, 3));
    EXPECT_NE(qlfg::eval::sample_indices(100, 50, 3), qlfg::eval::sample_indices(100, 50, 4));
}

TEST(TaskFiles, ParseAndReject) {
    const auto t = qlfg::eval::parse_mc_task(
        "{\"context\": \"2+2=\", \"choices\": [\"3\", \"4\"], \"gold\": 1}\n", "math");
    ASSERT_EQ(t.items.size(), 1u);
    EXPECT_EQ(t.items[0].gold, 1);
    EXPECT_THROW(qlfg::eval::parse_mc_task("{\"context\": \"a\", \"choices\": [\"x\"], \"gold\": 0}\n", "m"),
                 qlfg::DataError);
    EXPECT_THROW(qlfg::eval::parse_mc_task("{\"context\": \"a\", \"choices\": [\"x\", \"y\"], \"gold\": 2}\n", "m"),
                 qlfg::DataError);
    const auto s = qlfg::eval::parse_summ_task("{\"document\": \"d\", \"reference\": \"r\"}\n", "news");
    EXPECT_EQ(s.items[0].reference, "r");
}

TEST(Rouge, HandCountedCases) {
    EXPECT_DOUBLE_EQ(qlfg::eval::rouge2("a b c", "a b d"), 0.5);
    EXPECT_DOUBLE_EQ(qlfg::eval::rouge2("the cat sat on the mat", "the cat sat on the mat"), 1.0);
    EXPECT_DOUBLE_EQ(qlfg::eval::rouge2("alpha beta", "gamma delta"), 0.0);
    EXPECT_DOUBLE_EQ(qlfg::eval::rouge2("single", "single"), 0.0);
    EXPECT_DOUBLE_EQ(qlfg::eval::rouge2("", "a b"), 0.0);
    // Tokenization: lowercase, split on non-alphanumerics.
    EXPECT_EQ(qlfg::eval::rouge_tokens("Hello, World! x2"), (std::vector<std::string>{"hello", "world", "x2"}));
    EXPECT_DOUBLE_EQ(qlfg::eval::rouge2("The Cat.", "the-cat"), 1.0);
    // Clipped counts: candidate "a b a b a b" has 3 x "a b", reference one.
    // overlap 1, P = 1/5, R = 1/1 -> F1 = 2 * 0.2 / 1.2.
    EXPECT_NEAR(qlfg::eval::rouge2("a b a b a b", "a b"), 2.0 * 0.2 / 1.2, 1e-15);
}

TEST(Rouge, SymmetricInArguments) {
    qlfg::Rng rng(8);
    const std::vector<std::string> words = {"a", "b", "c", "d", "e"};
    for (int t = 0; t < 50; ++t) {
        std::string x;
        std::string y;
        for (int i = 0; i < 8; ++i) {
            x += words[rng.next_u64() % 5] + " ";
            y += words[rng.next_u64() % 5] + " ";
        }
        EXPECT_DOUBLE_EQ(qlfg::eval::rouge2(x, y), qlfg::eval::rouge2(y, x));
    }
}

MetricTable hand_table() {
    MetricTable t;
    t.add_metric("m1", true);
    t.add_metric("m2", true);
    for (const char* id : {"A", "B", "C"}) {
        t.add_model(id);
    }
    t.set(0, 0, 0.9);
    t.set(1, 0, 0.5);
    t.set(2, 0, 0.1);
    t.set(0, 1, 0.2);
    t.set(1, 1, 0.8);
    t.set(2, 1, 0.8);
    return t;
}

TEST(WinRate, HandEnumeratedThreeModels) {
    const auto w = qlfg::eval::mean_win_rate(hand_table());
    EXPECT_DOUBLE_EQ(w.mean.at("A"), 0.5);
    EXPECT_DOUBLE_EQ(w.mean.at("B"), 0.625);
    EXPECT_DOUBLE_EQ(w.mean.at("C"), 0.375);
    EXPECT_TRUE(w.excluded.empty());
}

TEST(WinRate, PerMetricSumIsHalfN) {
    qlfg::Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        MetricTable t;
        const std::size_t n = 2 + rng.next_u64() % 6;
        t.add_metric("x", true);
        t.add_metric("y", false);
        for (std::size_t i = 0; i < n; ++i) {
            t.add_model("m" + std::to_string(i));
            // Coarse values so ties occur.
            t.set(i, 0, static_cast<double>(rng.next_u64() % 3));
            t.set(i, 1, static_cast<double>(rng.next_u64() % 3));
        }
        const auto w = qlfg::eval::mean_win_rate(t);
        for (std::size_t k = 0; k < 2; ++k) {
            double sum = 0.0;
            for (const auto& [id, v] : w.per_metric) {
                sum += v[k];
            }
            EXPECT_NEAR(sum, static_cast<double>(n) / 2.0, 1e-12);
        }
    }
}

TEST(WinRate, InvariantUnderMonotoneRescaling) {
    const auto base = qlfg::eval::mean_win_rate(hand_table());
    auto t = hand_table();
    for (auto& row : t.cells) {
        row[0] = std::exp(5.0 * *row[0]) - 3.0;
        row[1] = std::pow(*row[1], 3.0);
    }
    EXPECT_EQ(qlfg::eval::mean_win_rate(t).mean, base.mean);
    // A decreasing map with the direction flipped ranks identically.
    auto f = hand_table();
    f.higher_is_better[1] = false;
    for (auto& row : f.cells) {
        row[1] = -*row[1];
    }
    EXPECT_EQ(qlfg::eval::mean_win_rate(f).mean, base.mean);
}

TEST(WinRate, DominanceAndAllTies) {
    MetricTable t;
    t.add_metric("a", true);
    t.add_metric("b", false);
    t.add_model("X");
    t.add_model("Y");
    t.set(0, 0, 2.0);
    t.set(1, 0, 1.0);
    t.set(0, 1, 0.1);
    t.set(1, 1, 0.2);
    const auto w = qlfg::eval::mean_win_rate(t);
    EXPECT_EQ(w.mean.at("X"), 1.0);
    EXPECT_EQ(w.mean.at("Y"), 0.0);
    for (auto& row : t.cells) {
        row = {0.5, 0.5};
    }
    const auto ties = qlfg::eval::mean_win_rate(t);
    EXPECT_EQ(ties.mean.at("X"), 0.5);
    EXPECT_EQ(ties.mean.at("Y"), 0.5);
}

TEST(WinRate, MissingCellExcludes) {
    auto t = hand_table();
    t.set(2, 1, std::nullopt);
    const auto w = qlfg::eval::mean_win_rate(t);
    EXPECT_EQ(w.excluded, std::vector<std::string>{"C"});
    EXPECT_EQ(w.mean.count("C"), 0u);
    EXPECT_DOUBLE_EQ(w.mean.at("A"), 0.5);
    t.set(1, 0, std::nullopt);
    EXPECT_THROW(qlfg::eval::mean_win_rate(t), qlfg::ConfigError);
}

TEST(Suite, SingleModelHasNoWinRate) {
    const auto task = synthetic_mc(20, 5);
    const auto lb = qlfg::eval::run_suite({oracle_model(task)}, {task}, {}, {50, 1});
    EXPECT_FALSE(lb.win_rates.has_value());
    ASSERT_FALSE(lb.notes.empty());
    EXPECT_NE(lb.notes[0].find("undefined"), std::string::npos);
    EXPECT_EQ(lb.to_json().find("mean_win_rate"), std::string::npos);
    EXPECT_NE(qlfg::eval::render_markdown(lb).find("| - |"), std::string::npos);
}

TEST(Suite, IdenticalCheckpointsBothHalf) {
    const auto m = qlfg::testing::adapted_model();
    const auto a = qlfg::eval::make_eval_model(m, "ckpt_a", 4);
    const auto b = qlfg::eval::make_eval_model(m, "ckpt_b", 4);
    MCTask task;
    task.name = "tiny";
    for (int i = 0; i < 6; ++i) {
        task.items.push_back({"q" + std::to_string(i), {"yes", "no", "maybe"}, i % 3});
    }
    qlfg::eval::SummTask summ;
    summ.name = "news";
    summ.items.push_back({"short doc", "short summary"});
    const auto lb = qlfg::eval::run_suite({a, b}, {task}, {summ}, {6, 2});
    ASSERT_TRUE(lb.win_rates.has_value());
    EXPECT_EQ(lb.win_rates->mean.at("ckpt_a"), 0.5);
    EXPECT_EQ(lb.win_rates->mean.at("ckpt_b"), 0.5);
    EXPECT_EQ(lb.table.cells[0], lb.table.cells[1]);
    EXPECT_EQ(lb.table.metrics, (std::vector<std::string>{"tiny.accuracy", "news.rouge2"}));
}

TEST(Suite, FailureBecomesMissingCell) {
    const auto task = synthetic_mc(20, 6);
    auto broken = uniform_model("broken");
    broken.mean_loglik = [](const std::string&, const std::string&) -> double { throw qlfg::DataError("boom"); };
    const auto lb = qlfg::eval::run_suite({oracle_model(task), uniform_model(), broken}, {task}, {}, {20, 1});
    ASSERT_TRUE(lb.win_rates.has_value());
    EXPECT_EQ(lb.win_rates->excluded, std::vector<std::string>{"broken"});
    EXPECT_FALSE(lb.table.cells[2][0].has_value());
    EXPECT_NE(qlfg::eval::render_markdown(lb).find("NULL"), std::string::npos);
    bool noted = false;
    for (const auto& n : lb.notes) {
        noted = noted || n.find("broken") != std::string::npos;
    }
    EXPECT_TRUE(noted);
}

TEST(Leaderboard, JsonRoundTripAndDeterminism) {
    const auto task = synthetic_mc(40, 7);
    const auto run = [&] {
        return qlfg::eval::run_suite({oracle_model(task), uniform_model()}, {task}, {}, {25, 3});
    };
    const auto lb = run();
    EXPECT_EQ(lb.to_json(), run().to_json());
    const auto back = qlfg::eval::Leaderboard::from_json(lb.to_json());
    EXPECT_EQ(back.to_json(), lb.to_json());
    EXPECT_EQ(back.table.models, lb.table.models);
    EXPECT_THROW(qlfg::eval::Leaderboard::from_json("{not json"), qlfg::DataError);
}

TEST(Leaderboard, MergeCombinesAndDetectsConflicts) {
    const auto task = synthetic_mc(40, 8);
    const auto a = qlfg::eval::run_suite({oracle_model(task)}, {task}, {}, {25, 3});
    const auto b = qlfg::eval::run_suite({uniform_model()}, {task}, {}, {25, 3});
    const auto merged = qlfg::eval::merge_leaderboards({a, b});
    EXPECT_EQ(merged.table.models.size(), 2u);
    ASSERT_TRUE(merged.win_rates.has_value());
    EXPECT_EQ(merged.win_rates->mean.at("oracle"), 1.0);
    auto c = b;
    c.table.cells[0][0] = 0.99;
    c.table.models[0] = "oracle";
    EXPECT_THROW(qlfg::eval::merge_leaderboards({a, c}), qlfg::DataError);
}

TEST(Leaderboard, MarkdownLayout) {
    const auto t = hand_table();
    qlfg::eval::Leaderboard lb;
    lb.table = t;
    lb.win_rates = qlfg::eval::mean_win_rate(t);
    const auto md = qlfg::eval::render_markdown(lb);
    EXPECT_EQ(md.rfind("# Benchmark results", 0), 0u);
    EXPECT_NE(md.find("0.9000"), std::string::npos);
    EXPECT_NE(md.find("0.6250"), std::string::npos);
}

TEST(EvalModel, LoglikMatchesTokenLogprobs) {
    const auto m = qlfg::testing::adapted_model();
    const auto em = qlfg::eval::make_eval_model(m, "tiny", 4);
    const double got = em.mean_loglik("ab", "cd");
    const std::vector<int> ids = {qlfg::model::ByteTokenizer::kBos, 'a', 'b', 'c', 'd'};
    const auto lp = qlfg::model::token_logprobs(m, ids);
    EXPECT_DOUBLE_EQ(got, (lp[2] + lp[3]) / 2.0);
    // Long contexts are cut from the left to fit max_seq (32).
    EXPECT_NO_THROW(em.mean_loglik(std::string(100, 'x'), "yz"));
    EXPECT_THROW(em.mean_loglik("a", std::string(40, 'y')), qlfg::DataError);
    EXPECT_LE(em.generate(std::string(100, 'x')).size(), 4u);
}

}  // namespace
