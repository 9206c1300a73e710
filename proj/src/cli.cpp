// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "qlfg/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iterator>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "qlfg/attention.hpp"
#include "qlfg/datapipe.hpp"
#include "qlfg/errors.hpp"
#include "qlfg/evalharness.hpp"
#include "qlfg/kernels.hpp"

#ifndef QLFG_VERSION
#define QLFG_VERSION "0.0.0"
#endif

namespace qlfg::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using Clock = std::chrono::system_clock;

std::string iso_utc(Clock::time_point t) {
    const std::time_t tt = Clock::to_time_t(t);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) {
        throw DataError("cannot write '" + path.string() + "'");
    }
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open '" + path.string() + "'");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string fmt(double v, const char* spec = "%.6f") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

// Tracks one artifact-producing command.
class Session {
public:
    explicit Session(std::string command) : start_(Clock::now()), steady_(std::chrono::steady_clock::now()) {
        manifest_.command = std::move(command);
    }
    RunManifest& manifest() { return manifest_; }
    void finish(const fs::path& artifact) {
        manifest_.started = iso_utc(start_);
        manifest_.finished = iso_utc(Clock::now());
        manifest_.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - steady_).count();
        manifest_.write(artifact);
    }

private:
    RunManifest manifest_;
    Clock::time_point start_;
    std::chrono::steady_clock::time_point steady_;
};

void apply_threads(int flag) {
    const int n = resolve_threads(flag);
    if (n > 0) {
        kernels::set_num_threads(n);
    }
}

config::RunConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
    config::RunConfig cfg = path.empty() ? config::RunConfig{} : config::RunConfig::load(path);
    if (seed) {
        cfg.train.seed = *seed;
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------- curate

struct CurateArgs {
    std::string plan;
    std::string corpora;
    std::string out;
    std::optional<std::uint64_t> seed;
};

int cmd_curate(const CurateArgs& a, std::ostream& out) {
    Session session("curate");
    data::MixPlan plan = data::MixPlan::load(a.plan);
    if (a.seed) {
        plan.seed = *a.seed;
    }
    if (!fs::is_directory(a.corpora)) {
        throw DataError("corpora directory '" + a.corpora + "' not found");
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(a.corpora)) {
        if (e.is_regular_file() && e.path().extension() == ".jsonl") {
            files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    std::map<std::string, std::vector<data::CorpusRecord>> corpora;
    for (const auto& f : files) {
        const std::string tag = f.stem().string();
        if (std::any_of(plan.components.begin(), plan.components.end(), [&](const auto& c) { return c.tag == tag; })) {
            corpora[tag] = data::read_jsonl(f, tag);
            session.manifest().inputs.push_back(f);
        } else {
            corpora[tag] = {};
        }
    }
    const auto result = data::compose(corpora, plan, data::default_provider());
    write_text(a.out, data::to_jsonl(result.records));
    const fs::path details = fs::path(a.out).string() + ".curation.json";
    write_text(details, data::compose_manifest_json(result, plan));

    auto& m = session.manifest();
    m.inputs.insert(m.inputs.begin(), a.plan);
    m.config_hash = config::sha256_file(a.plan);
    m.seeds["seed"] = plan.seed;
    m.outputs = {a.out, details};
    session.finish(a.out);
    out << "curated " << result.records.size() << " of " << result.sampled.size() << " sampled records ("
        << result.dedup.removed.size() << " near-duplicates removed)\n";
    return kExitOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
    std::string config;
    std::string data;
    std::string out;
    std::optional<std::uint64_t> seed;
    bool dry_run = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    Session session("train");
    const auto cfg = load_config(a.config, a.seed);
    auto m = prepare_model(cfg);
    std::optional<train::TokenizedCorpus> corpus;
    if (!a.data.empty()) {
        corpus = load_examples(a.data, cfg);
        for (const auto& w : corpus->warnings) {
            err << "warning: " << w << "\n";
        }
    }
    const double fraction =
        static_cast<double>(m.adapter_param_count()) / static_cast<double>(m.base_param_count());
    if (a.dry_run) {
        std::vector<std::uint64_t> sizes;
        for (const auto* l : m.linears()) {
            if (l->adapter) {
                sizes.push_back(l->adapter->A.size());
                sizes.push_back(l->adapter->B.size());
            }
        }
        out << "config_hash: " << cfg.hash() << "\n";
        out << "trainable params: " << train::format_trainable(m.adapter_param_count(), fraction) << "\n";
        out << "total params: " << m.base_param_count() << "\n";
        out << "adapters: " << m.adapter_count() << "\n";
        out << "model bytes: " << model::model_storage_bytes(m) << "\n";
        out << "optimizer state bytes: " << train::optimizer_state_bytes(cfg.train.optimizer, sizes) << "\n";
        if (corpus) {
            out << "examples: " << corpus->examples.size() << "\n";
            out << "optimizer steps: " << train::total_steps(corpus->examples.size(), cfg.train) << "\n";
        }
        return kExitOk;
    }
    if (a.data.empty() || a.out.empty()) {
        throw ConfigError("train requires --data and --out (or --dry-run)");
    }
    if (corpus->examples.empty()) {
        throw DataError("no usable training examples in '" + a.data + "'");
    }
    train::TrainOptions opts;
    opts.failure_checkpoint = fs::path(a.out).string() + ".failure.ckpt";
    const auto rep = train::train(m, corpus->examples, cfg.train, opts);
    for (const auto& w : rep.warnings) {
        err << "warning: " << w << "\n";
    }
    if (fs::path(a.out).has_parent_path()) {
        fs::create_directories(fs::path(a.out).parent_path());
    }
    model::to_checkpoint(m).save(a.out);
    const fs::path report = fs::path(a.out).string() + ".report.json";
    write_text(report, rep.to_json(false));

    auto& man = session.manifest();
    man.config_hash = cfg.hash();
    man.seeds["seed"] = cfg.train.seed;
    if (!a.config.empty()) {
        man.inputs.push_back(a.config);
    }
    man.inputs.push_back(a.data);
    man.outputs = {a.out, report};
    session.finish(a.out);

    out << "trainable params: " << train::format_trainable(rep.trainable_params, rep.trainable_fraction) << "\n";
    out << "steps: " << rep.steps << "\n";
    out << "final loss: " << fmt(rep.final_loss) << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
    std::string tasks;
    std::vector<std::string> models;
    std::size_t n = 50;
    std::uint64_t seed = 0;
    std::string out;
    int max_new_tokens = 48;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    Session session("eval");
    if (!fs::is_directory(a.tasks)) {
        throw DataError("task directory '" + a.tasks + "' not found");
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(a.tasks)) {
        if (e.is_regular_file() && e.path().extension() == ".jsonl") {
            files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
        throw DataError("no .jsonl task files in '" + a.tasks + "'");
    }
    std::vector<eval::MCTask> mc;
    std::vector<eval::SummTask> summ;
    for (const auto& f : files) {
        const std::string text = read_text(f);
        const auto nl = text.find('\n');
        const std::string first = text.substr(0, nl);
        if (first.find("\"choices\"") != std::string::npos) {
            mc.push_back(eval::parse_mc_task(text, f.stem().string()));
        } else if (first.find("\"document\"") != std::string::npos) {
            summ.push_back(eval::parse_summ_task(text, f.stem().string()));
        } else {
            throw DataError("'" + f.string() + "' is neither a multiple-choice nor a summarization task");
        }
        session.manifest().inputs.push_back(f);
    }
    std::vector<model::NanoTransformer> loaded;
    loaded.reserve(a.models.size());
    std::vector<eval::EvalModel> models;
    for (const auto& p : a.models) {
        loaded.push_back(model::from_checkpoint(Checkpoint::load(p)));
        session.manifest().inputs.push_back(p);
    }
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        models.push_back(eval::make_eval_model(loaded[i], fs::path(a.models[i]).stem().string(), a.max_new_tokens));
    }
    eval::SuiteConfig sc;
    sc.n_examples = a.n;
    sc.seed = a.seed;
    if (a.n == 0) {
        throw ConfigError("--n must be >= 1");
    }
    const auto lb = eval::run_suite(models, mc, summ, sc);
    write_text(a.out, lb.to_json());
    auto& man = session.manifest();
    man.seeds["seed"] = a.seed;
    man.outputs = {a.out};
    session.finish(a.out);
    out << eval::render_markdown(lb);
    return kExitOk;
}

// ---------------------------------------------------------------- ablate

struct AblateArgs {
    std::string config;
    std::string data;
    std::string axis;
    std::string out;
    std::optional<std::uint64_t> seed;
};

struct SweepPoint {
    std::string value;
    config::RunConfig cfg;
};

int cmd_ablate(const AblateArgs& a, std::ostream& out, std::ostream& err) {
    Session session("ablate");
    const auto base = load_config(a.config, a.seed);
    std::vector<SweepPoint> points;
    if (a.axis == "lora_r") {
        for (int r : {4, 8, 16, 64}) {
            auto c = base;
            c.train.lora_r = r;
            points.push_back({std::to_string(r), c});
        }
    } else if (a.axis == "targets") {
        for (auto t : lora::all_selectors()) {
            auto c = base;
            c.train.lora_target_modules = t;
            points.push_back({lora::to_string(t), c});
        }
    } else if (a.axis == "kernel") {
        for (auto k : {attn::Kernel::naive, attn::Kernel::streaming}) {
            auto c = base;
            c.model.kernel = k;
            points.push_back({attn::to_string(k), c});
        }
    } else {
        throw ConfigError("unknown ablation axis '" + a.axis + "' (expected lora_r, targets or kernel)");
    }
    const auto corpus = load_examples(a.data, base);
    for (const auto& w : corpus.warnings) {
        err << "warning: " << w << "\n";
    }
    if (corpus.examples.empty()) {
        throw DataError("no usable training examples in '" + a.data + "'");
    }
    std::uint64_t longest = 0;
    for (const auto& e : corpus.examples) {
        longest = std::max<std::uint64_t>(longest, e.input_ids.size());
    }

    std::string csv =
        "axis,value,trainable_params,trainable_fraction,model_bytes,optimizer_state_bytes,"
        "attention_workspace_bytes,activation_bytes_estimate,final_loss,wall_seconds\n";
    for (auto& p : points) {
        p.cfg.validate();
        auto m = prepare_model(p.cfg);
        const auto rep = train::train(m, corpus.examples, p.cfg.train);
        const auto ws = attn::attention_workspace_bytes(longest, static_cast<std::uint64_t>(p.cfg.model.head_dim()),
                                                        p.cfg.model.tile_size, p.cfg.model.kernel);
        csv += a.axis + "," + p.value + "," + std::to_string(rep.trainable_params) + "," +
               fmt(rep.trainable_fraction, "%.8f") + "," + std::to_string(rep.peak_model_bytes) + "," +
               std::to_string(rep.peak_optimizer_bytes) + "," + std::to_string(ws) + "," +
               std::to_string(rep.peak_activation_bytes_estimate) + "," + fmt(rep.final_loss, "%.8f") + "," +
               fmt(rep.wall_seconds, "%.3f") + "\n";
        out << a.axis << "=" << p.value << ": final loss " << fmt(rep.final_loss) << "\n";
    }
    write_text(a.out, csv);
    auto& man = session.manifest();
    man.config_hash = base.hash();
    man.seeds["seed"] = base.train.seed;
    if (!a.config.empty()) {
        man.inputs.push_back(a.config);
    }
    man.inputs.push_back(a.data);
    man.outputs = {a.out};
    session.finish(a.out);
    return kExitOk;
}

// ---------------------------------------------------------------- report

struct ReportArgs {
    std::vector<std::string> inputs;
    std::string out;
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
    Session session("report");
    std::vector<eval::Leaderboard> boards;
    for (const auto& p : a.inputs) {
        boards.push_back(eval::Leaderboard::from_json(read_text(p)));
    }
    const std::string md = eval::render_markdown(eval::merge_leaderboards(boards));
    if (a.out.empty()) {
        out << md;
        return kExitOk;
    }
    write_text(a.out, md);
    auto& man = session.manifest();
    man.inputs.assign(a.inputs.begin(), a.inputs.end());
    man.outputs = {a.out};
    session.finish(a.out);
    return kExitOk;
}

}  // namespace

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e) != nullptr || dynamic_cast<const DimensionError*>(&e) != nullptr) {
        return kExitConfig;
    }
    if (dynamic_cast<const NumericalError*>(&e) != nullptr) {
        return kExitNumerical;
    }
    return kExitData;
}

std::string RunManifest::to_json() const {
    json j;
    j["command"] = command;
    j["tool_version"] = QLFG_VERSION;
    j["config_hash"] = config_hash.empty() ? json(nullptr) : json(config_hash);
    j["seeds"] = seeds;
    auto digests = [](const std::vector<fs::path>& paths) {
        json arr = json::array();
        for (const auto& p : paths) {
            arr.push_back({{"path", p.string()}, {"sha256", config::sha256_file(p)}});
        }
        return arr;
    };
    j["inputs"] = digests(inputs);
    j["outputs"] = digests(outputs);
    j["timestamps"] = {{"started", started}, {"finished", finished}, {"wall_seconds", wall_seconds}};
    return j.dump(2) + "\n";
}

fs::path manifest_path(const fs::path& artifact) { return fs::path(artifact.string() + ".manifest.json"); }

void RunManifest::write(const fs::path& artifact) const { write_text(manifest_path(artifact), to_json()); }

int resolve_threads(int flag_value) {
    if (flag_value > 0) {
        return flag_value;
    }
    if (const char* env = std::getenv("QLFG_THREADS"); env != nullptr && *env != '\0') {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == nullptr || *end != '\0' || v < 1) {
            throw ConfigError("QLFG_THREADS must be a positive integer, got '" + std::string(env) + "'");
        }
        return static_cast<int>(v);
    }
    return 0;
}

model::NanoTransformer prepare_model(const config::RunConfig& cfg) {
    auto m = model::build_model(cfg.model, cfg.train.seed);
    model::freeze_and_quantize(m, cfg.policy(), cfg.block_size, cfg.superblock_size);
    model::attach_adapters(m, cfg.train.lora_target_modules, cfg.train.lora_r, static_cast<float>(cfg.train.lora_alpha),
                           static_cast<float>(cfg.train.lora_dropout), cfg.train.seed);
    return m;
}

train::TokenizedCorpus load_examples(const fs::path& path, const config::RunConfig& cfg) {
    return train::build_examples(data::read_jsonl(path, path.stem().string()), cfg.train);
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"QLoRA-style fine-tuning pipeline at desk scale", "qlfg"};
    app.require_subcommand(1);
    app.set_version_flag("--version", QLFG_VERSION);
    int threads = 0;
    app.add_option("--threads", threads, "Worker threads (default: QLFG_THREADS or all cores)");

    CurateArgs ca;
    auto* curate = app.add_subcommand("curate", "Compose and deduplicate a fine-tuning mix");
    curate->add_option("--plan,--config", ca.plan, "Mix plan file")->required();
    curate->add_option("--corpora", ca.corpora, "Directory of <source_tag>.jsonl files")->required();
    curate->add_option("--out", ca.out, "Curated JSONL output")->required();
    curate->add_option("--seed", ca.seed, "Override the plan seed");
    curate->add_option("--threads", threads, "Worker threads");

    TrainArgs ta;
    auto* trn = app.add_subcommand("train", "Fine-tune adapters on a JSONL corpus");
    trn->add_option("--config", ta.config, "key=value run configuration");
    trn->add_option("--data", ta.data, "Training corpus (JSONL)");
    trn->add_option("--out", ta.out, "Checkpoint output");
    trn->add_option("--seed", ta.seed, "Override the config seed");
    trn->add_flag("--dry-run", ta.dry_run, "Print accounting without training");
    trn->add_option("--threads", threads, "Worker threads");

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "Score checkpoints on a task suite");
    ev->add_option("--tasks", ea.tasks, "Directory of task JSONL files")->required();
    ev->add_option("--models", ea.models, "Checkpoints to compare")->required();
    ev->add_option("--n", ea.n, "Examples per task");
    ev->add_option("--seed", ea.seed, "Sampling seed");
    ev->add_option("--max-new-tokens", ea.max_new_tokens, "Generation budget for summarization");
    ev->add_option("--out", ea.out, "Leaderboard JSON output")->required();
    ev->add_option("--threads", threads, "Worker threads");

    AblateArgs aa;
    auto* abl = app.add_subcommand("ablate", "Sweep one axis and tabulate accounting and loss");
    abl->add_option("--config", aa.config, "key=value run configuration");
    abl->add_option("--data", aa.data, "Training corpus (JSONL)")->required();
    abl->add_option("--axis", aa.axis, "lora_r, targets or kernel")->required();
    abl->add_option("--out", aa.out, "CSV output")->required();
    abl->add_option("--seed", aa.seed, "Override the config seed");
    abl->add_option("--threads", threads, "Worker threads");

    ReportArgs ra;
    auto* rep = app.add_subcommand("report", "Merge leaderboards into a markdown report");
    rep->add_option("inputs", ra.inputs, "Leaderboard JSON files")->required();
    rep->add_option("--out", ra.out, "Markdown output (default: stdout)");
    rep->add_option("--threads", threads, "Worker threads");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        apply_threads(threads);
        if (curate->parsed()) {
            return cmd_curate(ca, out);
        }
        if (trn->parsed()) {
            return cmd_train(ta, out, err);
        }
        if (ev->parsed()) {
            return cmd_eval(ea, out);
        }
        if (abl->parsed()) {
            return cmd_ablate(aa, out, err);
        }
        return cmd_report(ra, out);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
}

}  // namespace qlfg::cli
