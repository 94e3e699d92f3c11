#pragma once

#include <functional>
#include <future>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "matpo/config.hpp"
#include "matpo/env.hpp"
#include "matpo/optimizer.hpp"
#include "matpo/rewards.hpp"
#include "matpo/rollout.hpp"
#include "matpo/trajlog.hpp"

namespace matpo {

struct StepMetrics {
    long step = 0;
    double loss = 0.0;
    double clip_fraction = 0.0;
    double mean_reward = 0.0;
    double mean_abs_advantage = 0.0;
    long planner_tokens = 0;   // generated tokens across planner/single rollouts
    long worker_tokens = 0;    // generated tokens across worker rollouts
    bool snapshot_refreshed = false;
    double eval_success = -1.0;  // present when an eval ran this step
};

struct EvalReport {
    std::string task_set_id;
    double success_rate = 0.0;
    double mean_turns = 0.0;
    double mean_planner_tokens = 0.0;  // context tokens of the lead trajectory
    double mean_worker_tokens = 0.0;   // context tokens per worker rollout
    std::vector<int> outcomes;         // one judge verdict per task
};

struct TrainResult {
    long final_step = 0;
    double first_eval = -1.0;
    double best_eval = -1.0;
    double final_eval = -1.0;
    long best_eval_step = -1;
    std::vector<std::pair<long, double>> eval_curve;
};

struct TrainSinks {
    std::ostream* metrics = nullptr;      // jsonl, one record per step
    std::ostream* rollout_log = nullptr;  // jsonl rollout records at the log cadence
    std::function<void(long, const class Trainer&)> on_checkpoint;
};

namespace detail {
inline constexpr std::uint64_t kSeedTask = 0x7a5be11;
inline constexpr std::uint64_t kSeedRollout = 0x2011011;
inline constexpr std::uint64_t kSeedEval = 0xe7a1;
} // namespace detail

class Trainer {
public:
    using SamplerFactory = std::function<ActionSampler(const TaskInstance&, int)>;

    explicit Trainer(RunConfig cfg, std::optional<std::vector<TaskInstance>> task_override = {})
        : cfg_(std::move(cfg)), vocab_(make_default_vocab()), lexicon_(vocab_) {
        cfg_.validate();
        const Blocklist blocklist = cfg_.blocklist_path.empty()
                                        ? Blocklist::defaults()
                                        : Blocklist::load(cfg_.blocklist_path);
        TaskGenOptions opts;
        opts.body_filler = cfg_.tasks.body_filler;
        opts.distractor_docs = cfg_.tasks.distractor_docs;
        opts.include_leak_doc = cfg_.tasks.leak_docs;

        std::vector<TaskInstance> tasks;
        if (task_override) {
            if (task_override->empty()) throw std::invalid_argument("task set must be nonempty");
            tasks = std::move(*task_override);
        } else {
            for (int i = 0; i < cfg_.tasks.count; ++i) {
                TaskInstance t;
                t.seed = mix_seed({cfg_.tasks.seed, static_cast<std::uint64_t>(i)});
                t.hop_count = cfg_.tasks.hop_count;
                tasks.push_back(t);
            }
        }
        for (const auto& spec : tasks) {
            auto [corpus, task] = generate_task(vocab_, lexicon_, spec.seed, spec.hop_count, opts);
            if (!spec.gold_answer.empty() && spec.gold_answer != task.gold_answer)
                throw std::runtime_error("task manifest disagrees with regenerated task");
            tasks_.push_back(task);
            envs_.emplace_back(vocab_, lexicon_, std::move(corpus), blocklist, cfg_.noise,
                               SearchConfig{cfg_.search_k});
        }

        params_ = primed_params(cfg_.feature_spec, vocab_, lexicon_, cfg_.init);
        params_old_ = snapshot(params_);
        if (cfg_.kl_coeff != 0.0) params_ref_ = snapshot(params_);  // the starting checkpoint
        judge_ = make_judge(cfg_.judge);

        engine_.planner = cfg_.planner_limits;
        engine_.worker = cfg_.worker_limits;
        engine_.recap = cfg_.recap;
        engine_.summary = cfg_.summary;
    }

    const RunConfig& config() const { return cfg_; }
    const Vocab& vocab() const { return vocab_; }
    const Lexicon& lexicon() const { return lexicon_; }
    const std::vector<TaskInstance>& tasks() const { return tasks_; }
    const ToolEnv& env(std::size_t task_index) const { return envs_.at(task_index); }
    const EngineConfig& engine_config() const { return engine_; }
    long step() const { return step_; }
    const PolicyParams& params() const { return params_; }
    const PolicyParams& params_snapshot() const { return params_old_; }
    PolicyParams& mutable_params() { return params_; }

    StepMetrics run_step(std::ostream* rollout_log = nullptr) {
        StepMetrics metrics;
        metrics.step = step_;
        metrics.snapshot_refreshed =
            maybe_refresh_snapshot(step_, cfg_.snapshot_period, params_, params_old_);

        const int q_count = cfg_.queries_per_step;
        const int g = cfg_.group_size;
        std::vector<std::size_t> task_index(static_cast<std::size_t>(q_count));
        for (int i = 0; i < q_count; ++i)
            task_index[static_cast<std::size_t>(i)] =
                mix_seed({cfg_.master_seed, detail::kSeedTask, static_cast<std::uint64_t>(step_),
                          static_cast<std::uint64_t>(i)}) %
                tasks_.size();

        struct Slot {
            MultiTrajectory multi;
            Trajectory single;
        };
        std::vector<Slot> slots(static_cast<std::size_t>(q_count * g));
        ActionSampler sampler = policy_sampler(params_old_, vocab_);
        auto run_one = [&](int i, int member) {
            const std::size_t t = task_index[static_cast<std::size_t>(i)];
            Rng rng(mix_seed({cfg_.master_seed, detail::kSeedRollout, static_cast<std::uint64_t>(step_),
                              static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(member)}));
            Slot& slot = slots[static_cast<std::size_t>(i * g + member)];
            if (cfg_.mode == TrainMode::matpo) {
                slot.multi = run_multi_agent(sampler, envs_[t], tasks_[t].query, engine_, rng);
            } else {
                slot.single = run_single_agent(sampler, envs_[t], tasks_[t].query,
                                               cfg_.planner_limits, rng, cfg_.summary);
            }
        };
        if (cfg_.threads > 1) {
            std::vector<std::future<void>> futures;
            for (int lane = 0; lane < cfg_.threads; ++lane) {
                futures.push_back(std::async(std::launch::async, [&, lane]() {
                    for (int job = lane; job < q_count * g; job += cfg_.threads)
                        run_one(job / g, job % g);
                }));
            }
            for (auto& f : futures) f.get();
        } else {
            for (int job = 0; job < q_count * g; ++job) run_one(job / g, job % g);
        }

        AugmentedBatch batch;
        double reward_sum = 0.0;
        double abs_adv_sum = 0.0;
        std::vector<trajlog::RolloutRecord> records;
        const bool log_now = rollout_log && step_ % cfg_.rollout_log_cadence == 0;

        for (int i = 0; i < q_count; ++i) {
            const std::size_t t = task_index[static_cast<std::size_t>(i)];
            std::vector<double> rewards;
            std::vector<RewardBreakdown> breakdowns;
            for (int member = 0; member < g; ++member) {
                const Slot& slot = slots[static_cast<std::size_t>(i * g + member)];
                RewardBreakdown r;
                if (cfg_.mode == TrainMode::matpo) {
                    r = score_rollout(vocab_, slot.multi, judge_, tasks_[t].gold_answer);
                } else {
                    std::vector<double> no_workers;
                    r = composite_reward(judge_(slot.single.terminal_answer, tasks_[t].gold_answer),
                                         fmt_for_trajectory(vocab_, slot.single), no_workers);
                }
                rewards.push_back(r.reward);
                reward_sum += r.reward;
                breakdowns.push_back(std::move(r));
            }
            std::vector<double> advantages = group_advantages(rewards);
            for (double a : advantages) abs_adv_sum += std::abs(a);

            if (cfg_.mode == TrainMode::matpo) {
                std::vector<const MultiTrajectory*> group;
                for (int member = 0; member < g; ++member)
                    group.push_back(&slots[static_cast<std::size_t>(i * g + member)].multi);
                batch = broadcast_advantages(group, advantages, i, std::move(batch));
            } else {
                std::vector<const Trajectory*> group;
                for (int member = 0; member < g; ++member)
                    group.push_back(&slots[static_cast<std::size_t>(i * g + member)].single);
                batch = single_agent_batch(group, advantages, i, std::move(batch));
            }

            for (int member = 0; member < g; ++member) {
                const Slot& slot = slots[static_cast<std::size_t>(i * g + member)];
                if (cfg_.mode == TrainMode::matpo) {
                    metrics.planner_tokens += masked_token_count(slot.multi.planner);
                    for (const auto& w : slot.multi.workers)
                        metrics.worker_tokens += masked_token_count(w);
                } else {
                    metrics.planner_tokens += masked_token_count(slot.single);
                }
                if (log_now) {
                    trajlog::RolloutRecord rec;
                    rec.step = step_;
                    rec.query_index = i;
                    rec.member = member;
                    rec.id = "s" + std::to_string(step_) + "-q" + std::to_string(i) + "-g" +
                             std::to_string(member);
                    rec.group = "s" + std::to_string(step_) + "-q" + std::to_string(i);
                    rec.mode = mode_name(cfg_.mode);
                    rec.query = tasks_[t].query;
                    rec.gold = tasks_[t].gold_answer;
                    rec.reward = breakdowns[static_cast<std::size_t>(member)];
                    rec.advantage = advantages[static_cast<std::size_t>(member)];
                    if (cfg_.mode == TrainMode::matpo) {
                        rec.final_answer = slot.multi.final_answer;
                        rec.trajectories.push_back(slot.multi.planner);
                        for (const auto& w : slot.multi.workers) rec.trajectories.push_back(w);
                    } else {
                        rec.final_answer = slot.single.terminal_answer;
                        rec.trajectories.push_back(slot.single);
                    }
                    records.push_back(std::move(rec));
                }
            }
        }

        KlPenalty kl{cfg_.kl_coeff, params_ref_ ? &*params_ref_ : nullptr};
        LossReport report = train_step(params_, params_old_, batch, adam_, cfg_.optimizer,
                                       cfg_.eps_clip, kl);
        if (!report.finite)
            throw std::runtime_error("non-finite gradient at step " + std::to_string(step_));
        metrics.loss = report.loss;
        metrics.clip_fraction = report.clip_fraction;
        metrics.mean_reward = reward_sum / static_cast<double>(q_count * g);
        metrics.mean_abs_advantage = abs_adv_sum / static_cast<double>(q_count * g);

        if (log_now)
            for (const auto& rec : records)
                (*rollout_log) << trajlog::record_to_json(vocab_, rec).dump() << '\n';

        ++step_;
        return metrics;
    }

    // Greedy (or seeded-sample) sweep over the task set with the current
    // parameters.
    EvalReport evaluate_policy() const {
        ActionSampler greedy = greedy_sampler(params_, vocab_);
        return evaluate_with([&](const TaskInstance&, int) {
            if (cfg_.eval.decoding == "greedy") return greedy;
            return policy_sampler(params_, vocab_);
        });
    }

    EvalReport evaluate_with(const SamplerFactory& factory) const {
        EvalReport report;
        report.task_set_id = "tasks-" + std::to_string(tasks_.size()) + "-h" +
                             std::to_string(cfg_.tasks.hop_count) + "-" +
                             std::to_string(cfg_.tasks.seed);
        double turns = 0.0, lead_tokens = 0.0, worker_tokens = 0.0;
        long worker_count = 0;
        for (std::size_t t = 0; t < tasks_.size(); ++t) {
            Rng rng(mix_seed({cfg_.master_seed, detail::kSeedEval, static_cast<std::uint64_t>(step_),
                              static_cast<std::uint64_t>(t)}));
            ActionSampler sampler = factory(tasks_[t], static_cast<int>(t));
            std::optional<std::string> answer;
            if (cfg_.mode == TrainMode::matpo) {
                MultiTrajectory multi =
                    run_multi_agent(sampler, envs_[t], tasks_[t].query, engine_, rng);
                answer = multi.final_answer;
                int gen = 0;
                for (const auto& m : multi.planner.messages) gen += (m.origin == Origin::generated);
                turns += gen;
                lead_tokens += multi.planner.total_tokens();
                for (const auto& w : multi.workers) {
                    worker_tokens += w.total_tokens();
                    ++worker_count;
                }
            } else {
                Trajectory single = run_single_agent(sampler, envs_[t], tasks_[t].query,
                                                     cfg_.planner_limits, rng, cfg_.summary);
                answer = single.terminal_answer;
                int gen = 0;
                for (const auto& m : single.messages) gen += (m.origin == Origin::generated);
                turns += gen;
                lead_tokens += single.total_tokens();
            }
            report.outcomes.push_back(judge_(answer, tasks_[t].gold_answer));
        }
        double sum = 0.0;
        for (int o : report.outcomes) sum += o;
        report.success_rate = sum / static_cast<double>(report.outcomes.size());
        report.mean_turns = turns / static_cast<double>(tasks_.size());
        report.mean_planner_tokens = lead_tokens / static_cast<double>(tasks_.size());
        report.mean_worker_tokens =
            worker_count == 0 ? 0.0 : worker_tokens / static_cast<double>(worker_count);
        return report;
    }

    TrainResult train(const TrainSinks& sinks = {}) {
        TrainResult result;
        auto note_eval = [&](double success) {
            result.eval_curve.push_back({step_, success});
            if (result.first_eval < 0.0) result.first_eval = success;
            if (success > result.best_eval) {
                result.best_eval = success;
                result.best_eval_step = step_;
            }
        };
        if (cfg_.total_steps == 0) {
            if (sinks.on_checkpoint) sinks.on_checkpoint(step_, *this);
            result.final_step = step_;
            return result;
        }
        while (step_ < cfg_.total_steps) {
            double eval_success = -1.0;
            if (step_ % cfg_.eval.cadence == 0) {
                eval_success = evaluate_policy().success_rate;
                note_eval(eval_success);
                if (cfg_.eval.stop_at_success > 0.0 && eval_success >= cfg_.eval.stop_at_success)
                    break;
            }
            StepMetrics m = run_step(sinks.rollout_log);
            m.eval_success = eval_success;
            if (sinks.metrics) write_metrics(*sinks.metrics, m);
            if (sinks.on_checkpoint && cfg_.checkpoint_cadence > 0 &&
                step_ % cfg_.checkpoint_cadence == 0)
                sinks.on_checkpoint(step_, *this);
        }
        const double final_success = evaluate_policy().success_rate;
        note_eval(final_success);
        result.final_eval = final_success;
        result.final_step = step_;
        if (sinks.on_checkpoint) sinks.on_checkpoint(step_, *this);
        return result;
    }

    void write_metrics(std::ostream& os, const StepMetrics& m) const {
        nlohmann::json j;
        j["step"] = m.step;
        j["loss"] = m.loss;
        j["clip_fraction"] = m.clip_fraction;
        j["mean_reward"] = m.mean_reward;
        j["mean_abs_advantage"] = m.mean_abs_advantage;
        j["planner_tokens"] = m.planner_tokens;
        j["worker_tokens"] = m.worker_tokens;
        j["snapshot"] = m.snapshot_refreshed;
        if (m.eval_success >= 0.0) j["eval_success"] = m.eval_success;
        os << j.dump() << '\n';
    }

    void save_checkpoint(std::ostream& os) const {
        os << "matpo-run-checkpoint v1\n";
        os << "step " << step_ << '\n';
        save_params(params_, os);
        save_params(params_old_, os);
        os << "adam " << adam_.t << ' ' << adam_.m.size() << '\n';
        char buf[64];
        auto dump = [&](const std::vector<double>& v) {
            for (double x : v) {
                std::snprintf(buf, sizeof(buf), "%a", x);
                os << buf << '\n';
            }
        };
        dump(adam_.m);
        dump(adam_.v);
    }

    void load_checkpoint(std::istream& is) {
        std::string line;
        if (!std::getline(is, line) || line != "matpo-run-checkpoint v1")
            throw std::runtime_error("run checkpoint: bad header");
        if (!std::getline(is, line) || line.rfind("step ", 0) != 0)
            throw std::runtime_error("run checkpoint: bad step line");
        step_ = std::stol(line.substr(5));
        params_ = load_params(is);
        params_old_ = load_params(is);
        check_compatible(params_, vocab_);
        if (!std::getline(is, line) || line.rfind("adam ", 0) != 0)
            throw std::runtime_error("run checkpoint: bad adam line");
        std::istringstream ss(line.substr(5));
        std::size_t count = 0;
        ss >> adam_.t >> count;
        auto read_vec = [&](std::vector<double>& v) {
            v.resize(count);
            for (std::size_t i = 0; i < count; ++i) {
                if (!std::getline(is, line)) throw std::runtime_error("run checkpoint: truncated");
                v[i] = std::strtod(line.c_str(), nullptr);
            }
        };
        read_vec(adam_.m);
        read_vec(adam_.v);
    }

private:
    RunConfig cfg_;
    Vocab vocab_;
    Lexicon lexicon_;
    std::vector<TaskInstance> tasks_;
    std::vector<ToolEnv> envs_;
    PolicyParams params_;
    PolicyParams params_old_;
    std::optional<PolicyParams> params_ref_;
    AdamState adam_;
    Judge judge_;
    EngineConfig engine_;
    long step_ = 0;
};

} // namespace matpo
