#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "matpo/env.hpp"
#include "matpo/optimizer.hpp"
#include "matpo/policy.hpp"
#include "matpo/rollout.hpp"

namespace matpo {

enum class TrainMode { single_agent, matpo };

inline const char* mode_name(TrainMode m) {
    return m == TrainMode::matpo ? "matpo" : "single_agent";
}

inline TrainMode mode_from(const std::string& s) {
    if (s == "matpo") return TrainMode::matpo;
    if (s == "single_agent") return TrainMode::single_agent;
    throw std::invalid_argument("unknown mode: " + s);
}

// Initial weights: "uniform" is all zeros; "grammar_primed" seeds the merged
// token grammar (close the call you opened, stop after closing) plus a mild
// copy prior on content tokens, standing in for the format competence a
// pretrained model brings to RL fine-tuning. Content and tool choices stay
// unprimed: those are what training must learn.
struct PolicyInitConfig {
    std::string kind = "grammar_primed";  // uniform | grammar_primed
    double structure_weight = 8.0;
    double copy_weight = 4.0;
    double stop_bias = 2.0;
};

struct TaskSetConfig {
    int count = 12;
    int hop_count = 2;
    std::uint64_t seed = 0xA11CE;
    int body_filler = 6;
    int distractor_docs = 2;
    bool leak_docs = false;
};

struct EvalSettings {
    long cadence = 100;
    std::string decoding = "greedy";  // greedy | sample
    double stop_at_success = 0.0;     // 0 disables early stopping
};

struct RunConfig {
    TrainMode mode = TrainMode::matpo;
    int group_size = 8;
    int queries_per_step = 8;
    long total_steps = 5000;
    double eps_clip = 0.2;
    long snapshot_period = 1;
    OptimizerConfig optimizer{0.05, 0.9, 0.999, 1e-8};
    double kl_coeff = 0.0;
    NoiseConfig noise{0.5, 4.0, 0.0};
    bool recap = true;
    bool summary = true;
    std::string blocklist_path;  // empty = built-in default list
    std::uint64_t master_seed = 1;
    RolloutLimits planner_limits{6, 2048, 128};
    RolloutLimits worker_limits{8, 2048, 128};
    int search_k = 5;
    FeatureSpec feature_spec{4, 256, 0x5eedf00dULL};
    PolicyInitConfig init;
    TaskSetConfig tasks;
    EvalSettings eval;
    std::string judge = "normalized";
    int threads = 1;
    long checkpoint_cadence = 1000;
    long rollout_log_cadence = 500;

    void validate() const {
        if (group_size < 2) throw std::invalid_argument("group_size must be >= 2");
        if (queries_per_step < 1) throw std::invalid_argument("queries_per_step must be >= 1");
        if (total_steps < 0) throw std::invalid_argument("total_steps must be >= 0");
        if (!(eps_clip > 0.0 && eps_clip < 1.0)) throw std::invalid_argument("eps_clip in (0,1)");
        if (snapshot_period < 1) throw std::invalid_argument("snapshot_period must be >= 1");
        if (tasks.count < 1) throw std::invalid_argument("task count must be >= 1");
        if (threads < 1) throw std::invalid_argument("threads must be >= 1");
        if (eval.cadence < 1) throw std::invalid_argument("eval cadence must be >= 1");
    }
};

inline nlohmann::json config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["mode"] = mode_name(c.mode);
    j["group_size"] = c.group_size;
    j["queries_per_step"] = c.queries_per_step;
    j["total_steps"] = c.total_steps;
    j["eps_clip"] = c.eps_clip;
    j["snapshot_period"] = c.snapshot_period;
    j["optimizer"] = {{"lr", c.optimizer.lr},
                      {"beta1", c.optimizer.beta1},
                      {"beta2", c.optimizer.beta2},
                      {"eps", c.optimizer.eps}};
    j["kl_coeff"] = c.kl_coeff;
    j["noise"] = {{"level", c.noise.level},
                  {"amplification", c.noise.amplification},
                  {"transient_fail_prob", c.noise.transient_fail_prob}};
    j["recap"] = c.recap;
    j["summary"] = c.summary;
    j["blocklist_path"] = c.blocklist_path;
    j["master_seed"] = c.master_seed;
    j["planner_limits"] = {{"max_turns", c.planner_limits.max_turns},
                           {"context_budget", c.planner_limits.context_budget},
                           {"max_action_tokens", c.planner_limits.max_action_tokens}};
    j["worker_limits"] = {{"max_turns", c.worker_limits.max_turns},
                          {"context_budget", c.worker_limits.context_budget},
                          {"max_action_tokens", c.worker_limits.max_action_tokens}};
    j["search_k"] = c.search_k;
    j["feature_spec"] = {{"window", c.feature_spec.window},
                         {"feature_count", c.feature_spec.feature_count},
                         {"hash_salt", c.feature_spec.hash_salt}};
    j["init"] = {{"kind", c.init.kind},
                 {"structure_weight", c.init.structure_weight},
                 {"copy_weight", c.init.copy_weight},
                 {"stop_bias", c.init.stop_bias}};
    j["tasks"] = {{"count", c.tasks.count},
                  {"hop_count", c.tasks.hop_count},
                  {"seed", c.tasks.seed},
                  {"body_filler", c.tasks.body_filler},
                  {"distractor_docs", c.tasks.distractor_docs},
                  {"leak_docs", c.tasks.leak_docs}};
    j["eval"] = {{"cadence", c.eval.cadence},
                 {"decoding", c.eval.decoding},
                 {"stop_at_success", c.eval.stop_at_success}};
    j["judge"] = c.judge;
    j["threads"] = c.threads;
    j["checkpoint_cadence"] = c.checkpoint_cadence;
    j["rollout_log_cadence"] = c.rollout_log_cadence;
    return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
    RunConfig c;
    c.mode = mode_from(j.value("mode", std::string("matpo")));
    c.group_size = j.value("group_size", c.group_size);
    c.queries_per_step = j.value("queries_per_step", c.queries_per_step);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.eps_clip = j.value("eps_clip", c.eps_clip);
    c.snapshot_period = j.value("snapshot_period", c.snapshot_period);
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        c.optimizer.lr = o.value("lr", c.optimizer.lr);
        c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
        c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
        c.optimizer.eps = o.value("eps", c.optimizer.eps);
    }
    c.kl_coeff = j.value("kl_coeff", c.kl_coeff);
    if (j.contains("noise")) {
        const auto& n = j.at("noise");
        c.noise.level = n.value("level", c.noise.level);
        c.noise.amplification = n.value("amplification", c.noise.amplification);
        c.noise.transient_fail_prob = n.value("transient_fail_prob", c.noise.transient_fail_prob);
    }
    c.recap = j.value("recap", c.recap);
    c.summary = j.value("summary", c.summary);
    c.blocklist_path = j.value("blocklist_path", c.blocklist_path);
    c.master_seed = j.value("master_seed", c.master_seed);
    auto limits = [](const nlohmann::json& l, RolloutLimits base) {
        base.max_turns = l.value("max_turns", base.max_turns);
        base.context_budget = l.value("context_budget", base.context_budget);
        base.max_action_tokens = l.value("max_action_tokens", base.max_action_tokens);
        return base;
    };
    if (j.contains("planner_limits")) c.planner_limits = limits(j.at("planner_limits"), c.planner_limits);
    if (j.contains("worker_limits")) c.worker_limits = limits(j.at("worker_limits"), c.worker_limits);
    c.search_k = j.value("search_k", c.search_k);
    if (j.contains("feature_spec")) {
        const auto& f = j.at("feature_spec");
        c.feature_spec.window = f.value("window", c.feature_spec.window);
        c.feature_spec.feature_count = f.value("feature_count", c.feature_spec.feature_count);
        c.feature_spec.hash_salt = f.value("hash_salt", c.feature_spec.hash_salt);
    }
    if (j.contains("init")) {
        const auto& i = j.at("init");
        c.init.kind = i.value("kind", c.init.kind);
        c.init.structure_weight = i.value("structure_weight", c.init.structure_weight);
        c.init.copy_weight = i.value("copy_weight", c.init.copy_weight);
        c.init.stop_bias = i.value("stop_bias", c.init.stop_bias);
    }
    if (j.contains("tasks")) {
        const auto& t = j.at("tasks");
        c.tasks.count = t.value("count", c.tasks.count);
        c.tasks.hop_count = t.value("hop_count", c.tasks.hop_count);
        c.tasks.seed = t.value("seed", c.tasks.seed);
        c.tasks.body_filler = t.value("body_filler", c.tasks.body_filler);
        c.tasks.distractor_docs = t.value("distractor_docs", c.tasks.distractor_docs);
        c.tasks.leak_docs = t.value("leak_docs", c.tasks.leak_docs);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        c.eval.cadence = e.value("cadence", c.eval.cadence);
        c.eval.decoding = e.value("decoding", c.eval.decoding);
        c.eval.stop_at_success = e.value("stop_at_success", c.eval.stop_at_success);
    }
    c.judge = j.value("judge", c.judge);
    c.threads = j.value("threads", c.threads);
    c.checkpoint_cadence = j.value("checkpoint_cadence", c.checkpoint_cadence);
    c.rollout_log_cadence = j.value("rollout_log_cadence", c.rollout_log_cadence);
    c.validate();
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config: " + path);
    nlohmann::json j;
    is >> j;
    return config_from_json(j);
}

// Grammar priming over the default alphabet; see PolicyInitConfig.
inline PolicyParams primed_params(const FeatureSpec& spec, const Vocab& vocab, const Lexicon& lex,
                                  const PolicyInitConfig& init) {
    PolicyParams p = PolicyParams::zeros(spec, vocab);
    if (init.kind == "uniform") return p;
    if (init.kind != "grammar_primed")
        throw std::invalid_argument("unknown policy init: " + init.kind);
    const double s = init.structure_weight;
    const TokenId v = vocab.size();
    auto prime = [&](int offset, TokenId given, TokenId emit, double w) {
        p.at(spec.feature_index(offset, given, v), emit) += w;
    };
    // keep untrained generations short
    p.at(0, lex.eoa) += init.stop_bias;
    // finish the grammar fragment you opened, then stop
    for (TokenId open : {lex.call_search, lex.call_scrape, lex.call_delegate})
        prime(2, open, lex.call_end, s);
    prime(2, lex.box_open, lex.box_close, s);
    prime(2, lex.report_open, lex.report_close, s);
    prime(1, lex.call_end, lex.eoa, s);
    prime(1, lex.box_close, lex.eoa, s);
    prime(1, lex.report_close, lex.eoa, s);
    // the summary instruction opens a report
    prime(1, lex.summarize, lex.report_open, s);
    // mild prior toward quoting recent content tokens
    for (TokenId t : lex.content_pool()) prime(3, t, t, init.copy_weight);
    return p;
}

} // namespace matpo
