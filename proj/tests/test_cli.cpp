// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include <json.hpp>

#include "qlfg/cli.hpp"
#include "qlfg/config.hpp"
#include "qlfg/datapipe.hpp"
#include "qlfg/errors.hpp"
#include "qlfg/evalharness.hpp"

namespace {

namespace fs = std::filesystem;

const fs::path kSource = QLFG_SOURCE_DIR;

struct Result {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir_ = fs::temp_directory_path() / ("qlfg_cli_" + std::to_string(::getpid()) + "_" + info->name());
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    fs::path path(const std::string& name) const { return dir_ / name; }

    Result run(const std::string& args, const std::string& env = "") const {
        const fs::path o = dir_ / "stdout.txt";
        const fs::path e = dir_ / "stderr.txt";
        const std::string cmd =
            env + " '" + std::string(QLFG_CLI_PATH) + "' " + args + " >'" + o.string() + "' 2>'" + e.string() + "'";
        const int status = std::system(cmd.c_str());
        Result r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.out = slurp(o);
        r.err = slurp(e);
        return r;
    }

    fs::path write(const std::string& name, const std::string& text) const {
        std::ofstream(dir_ / name, std::ios::binary) << text;
        return dir_ / name;
    }

    // Small model so every command finishes in well under a second.
    fs::path small_config(const std::string& extra = "", int d_model = 32) const {
        return write("small.cfg",
                     "seed=3\nmodel.n_layers=1\nmodel.d_model=" + std::to_string(d_model) +
                         "\nmodel.n_heads=2\nmodel.d_ffn=64\n"
                     "model.max_seq=256\ncutoff_len=256\nnum_epochs=1\nbatch_size=4\nmicro_batch_size=2\n"
                     "learning_rate=3e-3\nwarmup_steps=2\nlora_r=4\nlora_alpha=8\nlora_dropout=0.05\n"
                     "lora_target_modules=all_layers\noptimizer=adamw_8bit\n" +
                         extra);
    }

    std::string toy() const { return "'" + (kSource / "data/toy/train.jsonl").string() + "'"; }

    fs::path dir_;
};

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

TEST_F(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run("").code, 2);
    EXPECT_EQ(run("frobnicate").code, 2);
    EXPECT_EQ(run("train --bogus-flag").code, 2);
    EXPECT_EQ(run("--version").code, 0);
}

TEST_F(Cli, ThreadsEnvironmentValidated) {
    EXPECT_EQ(qlfg::cli::resolve_threads(3), 3);
    const auto r = run("train --dry-run", "QLFG_THREADS=abc");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("QLFG_THREADS"), std::string::npos);
    EXPECT_EQ(run("train --dry-run", "QLFG_THREADS=1").code, 0);
}

TEST_F(Cli, CurateSingleSourceIsDedupedSource) {
    const auto out = path("single.jsonl");
    const auto r = run("curate --plan " + q(kSource / "data/curate/plan_single.txt") + " --corpora " +
                       q(kSource / "data/curate/corpora") + " --out " + q(out));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto source = qlfg::data::read_jsonl(kSource / "data/curate/corpora/general.jsonl", "general");
    auto key = [](const qlfg::data::CorpusRecord& r) { return r.instruction + "\x1f" + r.output; };
    std::set<std::string> got;
    for (const auto& rec : qlfg::data::read_jsonl(out, "general")) {
        got.insert(key(rec));
    }
    // The fixture plants a near-duplicate after every fifth record; exactly
    // one of each pair survives and every other record is kept.
    ASSERT_EQ(source.size(), 48u);
    EXPECT_EQ(got.size(), 40u);
    for (std::size_t i = 0; i < source.size(); ++i) {
        if (i % 6 == 5) {
            EXPECT_NE(got.count(key(source[i])), got.count(key(source[i - 1]))) << i;
        } else if (i % 6 != 4) {
            EXPECT_EQ(got.count(key(source[i])), 1u) << i;
        }
    }
    EXPECT_TRUE(fs::exists(path("single.jsonl.manifest.json")));
    EXPECT_NE(r.out.find("8 near-duplicates removed"), std::string::npos);
}

TEST_F(Cli, CurateGoldenAndManifest) {
    const auto out = path("mix.jsonl");
    const auto args = "curate --plan " + q(kSource / "data/curate/plan_mix.txt") + " --corpora " +
                      q(kSource / "data/curate/corpora") + " --out " + q(out);
    ASSERT_EQ(run(args).code, 0);
    EXPECT_EQ(slurp(out), slurp(kSource / "data/curate/golden/mix.jsonl"));
    EXPECT_EQ(slurp(path("mix.jsonl.curation.json")), slurp(kSource / "data/curate/golden/mix.curation.json"));

    const auto man = nlohmann::json::parse(slurp(path("mix.jsonl.manifest.json")));
    EXPECT_EQ(man.at("command"), "curate");
    EXPECT_EQ(man.at("seeds").at("seed"), 7);
    EXPECT_EQ(man.at("config_hash"), qlfg::config::sha256_file(kSource / "data/curate/plan_mix.txt"));
    ASSERT_EQ(man.at("outputs").size(), 2u);
    EXPECT_EQ(man.at("outputs")[0].at("sha256"), qlfg::config::sha256_file(out));
    EXPECT_EQ(man.at("inputs").size(), 4u);  // plan + three sources
    EXPECT_TRUE(man.at("timestamps").contains("started"));

    // Exactly one manifest per artifact; rerunning overwrites it.
    ASSERT_EQ(run(args + " --threads 1").code, 0);
    std::size_t manifests = 0;
    for (const auto& e : fs::directory_iterator(dir_)) {
        manifests += e.path().string().ends_with(".manifest.json") ? 1 : 0;
    }
    EXPECT_EQ(manifests, 1u);
    EXPECT_EQ(slurp(out), slurp(kSource / "data/curate/golden/mix.jsonl"));
}

TEST_F(Cli, CurateErrors) {
    const auto plan = write("plan.txt", "seed=1\nforum=0.5\n");
    const auto r = run("curate --plan " + q(plan) + " --corpora " + q(kSource / "data/curate/corpora") + " --out " +
                       q(path("o.jsonl")));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("forum"), std::string::npos);
    for (const char* tag : {"chat", "general", "science"}) {
        EXPECT_NE(r.err.find(tag), std::string::npos) << tag;
    }
    EXPECT_EQ(run("curate --plan " + q(plan) + " --corpora " + q(path("none")) + " --out " + q(path("o.jsonl"))).code,
              3);
    const auto bad = write("bad.txt", "general=1.5\n");
    EXPECT_EQ(run("curate --plan " + q(bad) + " --corpora " + q(kSource / "data/curate/corpora") + " --out " +
                  q(path("o.jsonl")))
                  .code,
              2);
}

TEST_F(Cli, TrainUnknownKeyNamesIt) {
    const auto cfg = small_config("lora_rank=8\n");
    const auto r = run("train --config " + q(cfg) + " --dry-run");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("lora_rank"), std::string::npos);
    const auto dup = run("train --config " + q(small_config("lora_r=8\n")) + " --dry-run");
    EXPECT_EQ(dup.code, 2);
    EXPECT_NE(dup.err.find("duplicate key 'lora_r'"), std::string::npos);
}

TEST_F(Cli, TrainDryRunPrintsAccounting) {
    const auto r = run("train --config " + q(kSource / "configs/finetune_default.cfg") + " --dry-run");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("trainable params: "), std::string::npos);
    EXPECT_NE(r.out.find("optimizer state bytes: "), std::string::npos);
    EXPECT_NE(r.out.find("%)"), std::string::npos);
    const auto with_data = run("train --config " + q(small_config()) + " --data " + toy() + " --dry-run");
    ASSERT_EQ(with_data.code, 0) << with_data.err;
    EXPECT_NE(with_data.out.find("examples: 32"), std::string::npos);
    EXPECT_NE(with_data.out.find("optimizer steps: 8"), std::string::npos);
    EXPECT_EQ(std::distance(fs::directory_iterator(dir_), fs::directory_iterator{}), 3);  // cfg + captured streams
}

TEST_F(Cli, TrainWritesCheckpointReportAndManifest) {
    const auto ckpt = path("run.ckpt");
    const auto r = run("train --config " + q(small_config()) + " --data " + toy() + " --out " + q(ckpt));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("steps: 8"), std::string::npos);
    EXPECT_TRUE(fs::exists(ckpt));
    const auto rep = nlohmann::json::parse(slurp(path("run.ckpt.report.json")));
    EXPECT_EQ(rep.at("steps"), 8);
    const auto man = nlohmann::json::parse(slurp(path("run.ckpt.manifest.json")));
    EXPECT_EQ(man.at("command"), "train");
    EXPECT_EQ(man.at("seeds").at("seed"), 3);
    EXPECT_EQ(man.at("config_hash").get<std::string>().size(), 64u);
}

TEST_F(Cli, TrainDeterministicAcrossThreadSettings) {
    const auto cfg = small_config();
    ASSERT_EQ(run("train --config " + q(cfg) + " --data " + toy() + " --out " + q(path("a.ckpt"))).code, 0);
    ASSERT_EQ(run("train --config " + q(cfg) + " --data " + toy() + " --out " + q(path("b.ckpt")) + " --threads 1")
                  .code,
              0);
    ASSERT_EQ(run("train --config " + q(cfg) + " --data " + toy() + " --out " + q(path("c.ckpt")), "QLFG_THREADS=1")
                  .code,
              0);
    EXPECT_EQ(slurp(path("a.ckpt")), slurp(path("b.ckpt")));
    EXPECT_EQ(slurp(path("a.ckpt")), slurp(path("c.ckpt")));
    EXPECT_EQ(slurp(path("a.ckpt.report.json")), slurp(path("b.ckpt.report.json")));
    // A different seed changes the result.
    ASSERT_EQ(run("train --config " + q(cfg) + " --data " + toy() + " --out " + q(path("d.ckpt")) + " --seed 4").code,
              0);
    EXPECT_NE(slurp(path("a.ckpt")), slurp(path("d.ckpt")));
}

TEST_F(Cli, TrainNumericalAbortExitsFour) {
    std::string text = slurp(small_config());
    text.replace(text.find("learning_rate=3e-3"), 18, "learning_rate=3e38");
    text.replace(text.find("warmup_steps=2"), 14, "warmup_steps=0");
    const auto cfg = write("overflow.cfg", text);
    const auto r = run("train --config " + q(cfg) + " --data " + toy() + " --out " + q(path("x.ckpt")));
    EXPECT_EQ(r.code, 4);
    EXPECT_NE(r.err.find("non-finite"), std::string::npos);
    EXPECT_NE(r.err.find("at step"), std::string::npos);
    EXPECT_TRUE(fs::exists(path("x.ckpt.failure.ckpt")));
    EXPECT_FALSE(fs::exists(path("x.ckpt")));
}

TEST_F(Cli, TrainDataErrorsExitThree) {
    const auto bad = write("bad.jsonl", "{\"instruction\": \"a\", \"output\": \"b\"}\n{not json\n");
    const auto r = run("train --config " + q(small_config()) + " --data " + q(bad) + " --out " + q(path("x.ckpt")));
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("line 2"), std::string::npos);
    EXPECT_EQ(run("train --config " + q(small_config()) + " --data " + q(path("missing.jsonl")) + " --out " +
                  q(path("x.ckpt")))
                  .code,
              3);
    EXPECT_EQ(run("train --config " + q(path("missing.cfg")) + " --dry-run").code, 2);
}

TEST_F(Cli, EvalWritesLeaderboard) {
    const auto cfg = small_config();
    ASSERT_EQ(run("train --config " + q(cfg) + " --data " + toy() + " --out " + q(path("tuned.ckpt"))).code, 0);
    ASSERT_EQ(run("train --config " + q(cfg) + " --data " + toy() + " --out " + q(path("other.ckpt")) + " --seed 9")
                  .code,
              0);
    const std::string common = "eval --tasks " + q(kSource / "data/eval") + " --models " + q(path("tuned.ckpt")) +
                               " " + q(path("other.ckpt")) + " --n 10 --seed 2 --max-new-tokens 8";
    const auto r = run(common + " --out " + q(path("lb1.json")));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("| tuned |"), std::string::npos);
    const auto lb = nlohmann::json::parse(slurp(path("lb1.json")));
    EXPECT_EQ(lb.at("metrics").size(), 2u);
    EXPECT_EQ(lb.at("models").size(), 2u);
    EXPECT_TRUE(lb.at("models")[0].contains("mean_win_rate"));
    const double w0 = lb.at("models")[0].at("mean_win_rate");
    const double w1 = lb.at("models")[1].at("mean_win_rate");
    EXPECT_DOUBLE_EQ(w0 + w1, 1.0);
    ASSERT_EQ(run(common + " --threads 1 --out " + q(path("lb2.json"))).code, 0);
    EXPECT_EQ(slurp(path("lb1.json")), slurp(path("lb2.json")));
    EXPECT_TRUE(fs::exists(path("lb1.json.manifest.json")));

    EXPECT_EQ(run("eval --tasks " + q(kSource / "data/eval") + " --models " + q(path("tuned.ckpt")) +
                  " --n 0 --out " + q(path("x.json")))
                  .code,
              2);
    EXPECT_EQ(run("eval --tasks " + q(kSource / "data/eval") + " --models " + q(path("nope.ckpt")) + " --out " +
                  q(path("x.json")))
                  .code,
              3);
    write("corrupt.ckpt", "QLFGCKPT garbage");
    EXPECT_EQ(run("eval --tasks " + q(kSource / "data/eval") + " --models " + q(path("corrupt.ckpt")) + " --out " +
                  q(path("x.json")))
                  .code,
              3);
}

std::vector<std::vector<std::string>> read_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string c;
        while (std::getline(ls, c, ',')) {
            cells.push_back(c);
        }
        rows.push_back(cells);
    }
    return rows;
}

TEST_F(Cli, AblateLoraRankStateBytesIncrease) {
    // Rank 64 needs d_model >= 64.
    const auto r = run("ablate --config " + q(small_config("", 64)) + " --data " + toy() + " --axis lora_r --out " +
                       q(path("r.csv")));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rows = read_csv(slurp(path("r.csv")));
    ASSERT_EQ(rows.size(), 5u);
    EXPECT_EQ(rows[0][5], "optimizer_state_bytes");
    for (std::size_t i = 2; i < rows.size(); ++i) {
        EXPECT_LT(std::stoull(rows[i - 1][5]), std::stoull(rows[i][5]));
        EXPECT_LT(std::stoull(rows[i - 1][2]), std::stoull(rows[i][2]));
    }
    EXPECT_EQ(rows[1][1], "4");
    EXPECT_EQ(rows[4][1], "64");
}

TEST_F(Cli, AblateTargetsSupersetMonotone) {
    ASSERT_EQ(run("ablate --config " + q(small_config()) + " --data " + toy() + " --axis targets --out " +
                  q(path("t.csv")))
                  .code,
              0);
    std::map<std::string, std::uint64_t> params;
    for (const auto& row : read_csv(slurp(path("t.csv")))) {
        if (row[0] == "targets") {
            params[row[1]] = std::stoull(row[2]);
        }
    }
    ASSERT_EQ(params.size(), 5u);
    EXPECT_LT(params.at("key_query"), params.at("all_attention"));
    EXPECT_LT(params.at("all_attention"), params.at("all_layers"));
    EXPECT_LT(params.at("all_ffn"), params.at("all_layers"));
    EXPECT_LT(params.at("attention_plus_ffn_output"), params.at("all_layers"));
}

TEST_F(Cli, AblateKernelEqualLossesSmallerWorkspace) {
    ASSERT_EQ(run("ablate --config " + q(small_config()) + " --data " + toy() + " --axis kernel --out " +
                  q(path("k.csv")))
                  .code,
              0);
    const auto rows = read_csv(slurp(path("k.csv")));
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[1][1], "naive");
    EXPECT_EQ(rows[2][1], "streaming");
    EXPECT_LT(std::stoull(rows[2][6]), std::stoull(rows[1][6]));
    EXPECT_LE(std::fabs(std::stod(rows[1][8]) - std::stod(rows[2][8])), 1e-4);
    EXPECT_EQ(run("ablate --config " + q(small_config()) + " --data " + toy() + " --axis depth --out " +
                  q(path("z.csv")))
                  .code,
              2);
}

TEST_F(Cli, ReportGoldenAndErrors) {
    const auto a = kSource / "data/report/board_a.json";
    const auto b = kSource / "data/report/board_b.json";
    ASSERT_EQ(run("report " + q(a) + " " + q(b) + " --out " + q(path("r.md"))).code, 0);
    EXPECT_EQ(slurp(path("r.md")), slurp(kSource / "data/report/golden.md"));
    EXPECT_TRUE(fs::exists(path("r.md.manifest.json")));

    const auto single = run("report " + q(a));
    ASSERT_EQ(single.code, 0);
    const auto board = qlfg::eval::Leaderboard::from_json(slurp(a));
    EXPECT_EQ(single.out, qlfg::eval::render_markdown(board));

    auto conflict = nlohmann::json::parse(slurp(b));
    conflict["models"][0]["scores"]["heldout_mc.accuracy"] = 0.61;
    write("conflict.json", conflict.dump());
    const auto c = run("report " + q(a) + " " + q(path("conflict.json")));
    EXPECT_EQ(c.code, 3);
    EXPECT_NE(c.err.find("tuned"), std::string::npos);

    write("broken.json", "{\"models\": [");
    EXPECT_EQ(run("report " + q(path("broken.json"))).code, 3);
    EXPECT_EQ(run("report " + q(path("absent.json"))).code, 3);
}

TEST(ExitCodes, MapErrorKinds) {
    EXPECT_EQ(qlfg::cli::exit_code_for(qlfg::ConfigError("x")), 2);
    EXPECT_EQ(qlfg::cli::exit_code_for(qlfg::DimensionError("x")), 2);
    EXPECT_EQ(qlfg::cli::exit_code_for(qlfg::DataError("x")), 3);
    EXPECT_EQ(qlfg::cli::exit_code_for(qlfg::NumericalError("x")), 4);
    EXPECT_EQ(qlfg::cli::exit_code_for(std::runtime_error("x")), 3);
}

}  // namespace
