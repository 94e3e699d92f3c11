// Command-line front end: init / train / eval / replay / recompute-rewards /
// gen-tasks. All state lives in plain files (json config, jsonl logs, text
// checkpoints) so every run is reproducible from its config and seeds.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "matpo/config.hpp"
#include "matpo/env.hpp"
#include "matpo/trainer.hpp"
#include "matpo/trajlog.hpp"

namespace fs = std::filesystem;
using namespace matpo;

namespace {

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, mode);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    return os;
}

int cmd_init(const std::string& out) {
    RunConfig defaults;
    auto os = open_out(out);
    os << config_to_json(defaults).dump(2) << '\n';
    std::cout << "wrote " << out << '\n';
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::string& resume) {
    RunConfig cfg = load_config(config_path);
    Trainer trainer(cfg);
    if (!resume.empty()) {
        std::ifstream is(resume);
        if (!is) throw std::runtime_error("cannot open checkpoint: " + resume);
        trainer.load_checkpoint(is);
        std::cout << "resumed from step " << trainer.step() << '\n';
    }
    const fs::path dir(out_dir);
    auto metrics = open_out(dir / "metrics.jsonl", resume.empty() ? std::ios::out : std::ios::app);
    auto rollouts = open_out(dir / "rollouts.jsonl", resume.empty() ? std::ios::out : std::ios::app);
    TrainSinks sinks;
    sinks.metrics = &metrics;
    sinks.rollout_log = &rollouts;
    sinks.on_checkpoint = [&dir](long step, const Trainer& t) {
        auto os = open_out(dir / ("checkpoint_" + std::to_string(step) + ".txt"));
        t.save_checkpoint(os);
        auto latest = open_out(dir / "checkpoint_latest.txt");
        t.save_checkpoint(latest);
    };
    TrainResult result = trainer.train(sinks);
    std::cout << "finished at step " << result.final_step;
    if (result.final_eval >= 0.0) std::cout << ", final eval success " << result.final_eval;
    if (result.first_eval >= 0.0) std::cout << " (initial " << result.first_eval << ")";
    std::cout << '\n';
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint,
             const std::string& tasks_path) {
    RunConfig cfg = load_config(config_path);
    std::optional<std::vector<TaskInstance>> tasks;
    if (!tasks_path.empty()) {
        std::ifstream is(tasks_path);
        if (!is) throw std::runtime_error("cannot open task manifest: " + tasks_path);
        tasks = load_tasks(is);
    }
    Trainer trainer(cfg, std::move(tasks));
    if (!checkpoint.empty()) {
        std::ifstream is(checkpoint);
        if (!is) throw std::runtime_error("cannot open checkpoint: " + checkpoint);
        trainer.load_checkpoint(is);
    }
    EvalReport report = trainer.evaluate_policy();
    nlohmann::json j;
    j["task_set_id"] = report.task_set_id;
    j["success_rate"] = report.success_rate;
    j["mean_turns"] = report.mean_turns;
    j["mean_planner_tokens"] = report.mean_planner_tokens;
    j["mean_worker_tokens"] = report.mean_worker_tokens;
    j["outcomes"] = report.outcomes;
    std::cout << j.dump(2) << '\n';
    return 0;
}

int cmd_replay(const std::string& log_path, const std::string& id) {
    Vocab vocab = make_default_vocab();
    std::ifstream is(log_path);
    if (!is) throw std::runtime_error("cannot open log: " + log_path);
    auto rec = trajlog::find_record(vocab, is, id);
    if (!rec) {
        std::cerr << "rollout id not found: " << id << '\n';
        return 1;
    }
    std::cout << trajlog::transcript(vocab, *rec);
    return 0;
}

int cmd_recompute(const std::string& log_path, const std::string& judge_name) {
    Vocab vocab = make_default_vocab();
    Judge judge = make_judge(judge_name);
    std::ifstream is(log_path);
    if (!is) throw std::runtime_error("cannot open log: " + log_path);
    std::string line;
    long line_no = 0, checked = 0, mismatched = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            std::cerr << "malformed record at line " << line_no << '\n';
            return 1;
        }
        trajlog::RolloutRecord rec = trajlog::record_from_json(vocab, j);
        RewardBreakdown fresh = trajlog::recompute_reward(vocab, rec, judge);
        ++checked;
        const bool same = fresh.acc == rec.reward.acc && fresh.fmt_p == rec.reward.fmt_p &&
                          fresh.fmt == rec.reward.fmt && fresh.reward == rec.reward.reward;
        if (!same) {
            ++mismatched;
            std::cout << rec.id << ": logged reward " << rec.reward.reward << ", recomputed "
                      << fresh.reward << '\n';
        }
    }
    std::cout << checked << " records checked, " << mismatched << " mismatched\n";
    return mismatched == 0 ? 0 : 1;
}

int cmd_gen_tasks(std::uint64_t seed, int count, int hops, const std::string& out,
                  const std::string& corpus_dir, bool leak) {
    Vocab vocab = make_default_vocab();
    Lexicon lexicon(vocab);
    TaskGenOptions opts;
    opts.include_leak_doc = leak;
    std::vector<TaskInstance> tasks;
    for (int i = 0; i < count; ++i) {
        const std::uint64_t task_seed = mix_seed({seed, static_cast<std::uint64_t>(i)});
        auto [corpus, task] = generate_task(vocab, lexicon, task_seed, hops, opts);
        tasks.push_back(task);
        if (!corpus_dir.empty()) {
            auto os = open_out(fs::path(corpus_dir) / ("corpus_" + std::to_string(task_seed) + ".jsonl"));
            save_corpus(vocab, corpus, os);
        }
    }
    auto os = open_out(out);
    save_tasks(tasks, os);
    std::cout << "wrote " << tasks.size() << " tasks to " << out << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale multi-agent tool-integrated policy optimization"};
    app.require_subcommand(1);

    std::string config_path = "config.json";
    std::string out_dir = "runs/default";
    std::string checkpoint, tasks_path, resume;
    std::string log_path, rollout_id;
    std::string judge_name = "normalized";
    std::string corpus_dir;
    std::uint64_t seed = 0xA11CE;
    int count = 12, hops = 2;
    bool leak = false;

    auto* init = app.add_subcommand("init", "write a config file with full defaults");
    init->add_option("--out", config_path, "output path");

    auto* train = app.add_subcommand("train", "run the training loop");
    train->add_option("--config", config_path, "config file")->required();
    train->add_option("--out", out_dir, "output directory for metrics/logs/checkpoints");
    train->add_option("--resume", resume, "checkpoint to resume from");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a task set");
    eval->add_option("--config", config_path, "config file")->required();
    eval->add_option("--checkpoint", checkpoint, "run checkpoint (defaults to the initial policy)");
    eval->add_option("--tasks", tasks_path, "task manifest (defaults to the config task set)");

    auto* replay = app.add_subcommand("replay", "print a logged rollout as a transcript");
    replay->add_option("--log", log_path, "rollout log (jsonl)")->required();
    replay->add_option("--id", rollout_id, "rollout id, e.g. s0-q1-g3")->required();

    auto* recompute = app.add_subcommand("recompute-rewards", "re-derive rewards from a rollout log");
    recompute->add_option("--log", log_path, "rollout log (jsonl)")->required();
    recompute->add_option("--judge", judge_name, "normalized | token_set");

    auto* gen = app.add_subcommand("gen-tasks", "generate a synthetic retrieval task manifest");
    gen->add_option("--seed", seed, "base seed");
    gen->add_option("--count", count, "number of tasks");
    gen->add_option("--hops", hops, "retrieval hops per task");
    gen->add_option("--out", tasks_path, "manifest output path")->required();
    gen->add_option("--corpora", corpus_dir, "also write per-task corpus files here");
    gen->add_flag("--leak-docs", leak, "include answer-leaking documents (blocklist drill)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*init) return cmd_init(config_path);
        if (*train) return cmd_train(config_path, out_dir, resume);
        if (*eval) return cmd_eval(config_path, checkpoint, tasks_path);
        if (*replay) return cmd_replay(log_path, rollout_id);
        if (*recompute) return cmd_recompute(log_path, judge_name);
        if (*gen) return cmd_gen_tasks(seed, count, hops, tasks_path, corpus_dir, leak);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
