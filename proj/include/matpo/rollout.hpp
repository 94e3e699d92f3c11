#pragma once

#include <functional>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "matpo/env.hpp"
#include "matpo/grammar.hpp"
#include "matpo/policy.hpp"
#include "matpo/rng.hpp"
#include "matpo/vocab.hpp"

namespace matpo {

enum class Origin { system, query, generated, tool };

struct Message {
    Origin origin = Origin::system;
    std::vector<TokenId> tokens;
    int turn_index = 0;
};

struct Trajectory {
    Role role = Role::worker;
    std::vector<Message> messages;
    std::string subtask_query;                 // workers only
    std::optional<std::string> terminal_answer;
    bool truncated = false;

    int total_tokens() const {
        int n = 0;
        for (const auto& m : messages) n += static_cast<int>(m.tokens.size());
        return n;
    }

    std::vector<TokenId> context_tokens() const {
        std::vector<TokenId> out;
        for (const auto& m : messages) out.insert(out.end(), m.tokens.begin(), m.tokens.end());
        return out;
    }
};

struct MultiTrajectory {
    Trajectory planner;
    std::vector<Trajectory> workers;
    std::string query;
    std::optional<std::string> final_answer;
};

struct RolloutLimits {
    int max_turns = 6;
    int context_budget = 2048;
    int max_action_tokens = 128;
};

struct EngineConfig {
    RolloutLimits planner{6, 2048, 128};
    RolloutLimits worker{8, 2048, 128};
    bool recap = true;    // embed the main query in the worker prompt
    bool summary = true;  // forced final summary + summary-based reply channel
};

// Anything that can produce an action given a context: the live policy,
// greedy decoding, or a scripted sequence in tests.
using ActionSampler = std::function<std::vector<TokenId>(const Context&, int, Rng&)>;

inline ActionSampler policy_sampler(const PolicyParams& params, const Vocab& vocab) {
    return [&params, &vocab](const Context& ctx, int max_tokens, Rng& rng) {
        return sample_action(params, vocab, ctx, max_tokens, rng);
    };
}

inline ActionSampler greedy_sampler(const PolicyParams& params, const Vocab& vocab) {
    return [&params, &vocab](const Context& ctx, int max_tokens, Rng&) {
        return greedy_action(params, vocab, ctx, max_tokens);
    };
}

// Replays a fixed list of actions; trims to the token cap like a real sampler.
inline ActionSampler scripted_sampler(std::vector<std::vector<TokenId>> actions) {
    auto queue = std::make_shared<std::vector<std::vector<TokenId>>>(std::move(actions));
    auto next = std::make_shared<std::size_t>(0);
    return [queue, next](const Context&, int max_tokens, Rng&) {
        std::vector<TokenId> a;
        if (*next < queue->size()) a = (*queue)[(*next)++];
        if (static_cast<int>(a.size()) > max_tokens) a.resize(static_cast<std::size_t>(max_tokens));
        return a;
    };
}

// Rule-following sampler that reads the context tail cues the way a fully
// trained policy would: delegate at the planner cue, search at the worker cue,
// chase link keys, box the answer once an "is" cue appears. Serves as the
// behavior ceiling in evaluations and as a deterministic driver in tests.
inline ActionSampler reflex_sampler(const Lexicon& lex) {
    return [&lex](const Context& ctx, int max_tokens, Rng&) -> std::vector<TokenId> {
        const auto& t = ctx.tokens;
        const std::size_t n = t.size();
        std::vector<TokenId> action;
        auto emit = [&](std::initializer_list<TokenId> ids) {
            action.assign(ids);
            if (static_cast<int>(action.size()) > max_tokens)
                action.resize(static_cast<std::size_t>(max_tokens));
            return action;
        };
        if (n == 0) return action;
        const TokenId last = t[n - 1];
        if (last == lex.cue_planner && n >= 2)
            return emit({lex.call_delegate, t[n - 2], lex.call_end, lex.eoa});
        if (last == lex.cue_worker && n >= 2)
            return emit({lex.call_search, t[n - 2], lex.call_end, lex.eoa});
        if (last == lex.tool_close && n >= 3) {
            const TokenId source = t[n - 2];
            const TokenId cue = t[n - 3];
            if (cue == lex.w_is) return emit({lex.box_open, source, lex.box_close, lex.eoa});
            if (cue == lex.w_url) return emit({lex.call_scrape, source, lex.call_end, lex.eoa});
            return emit({lex.call_search, source, lex.call_end, lex.eoa});
        }
        if (last == lex.summarize && n >= 2)
            return emit({lex.report_open, t[n - 2], lex.report_close, lex.eoa});
        return emit({lex.eoa});
    };
}

// Mask over the concatenated trajectory tokens: 1 exactly on generated ones.
inline std::vector<std::uint8_t> token_mask(const Trajectory& traj) {
    std::vector<std::uint8_t> mask;
    for (const auto& m : traj.messages) {
        const std::uint8_t bit = m.origin == Origin::generated ? 1 : 0;
        mask.insert(mask.end(), m.tokens.size(), bit);
    }
    return mask;
}

inline long masked_token_count(const Trajectory& traj) {
    long n = 0;
    for (const auto& m : traj.messages)
        if (m.origin == Origin::generated) n += static_cast<long>(m.tokens.size());
    return n;
}

// Ensures the worker prompt carries the main query in its recap slot; a
// second application is a no-op.
inline std::vector<TokenId> user_query_recap(std::vector<TokenId> worker_prompt,
                                             std::span<const TokenId> main_query,
                                             const Lexicon& lex) {
    for (TokenId t : worker_prompt)
        if (t == lex.recap) return worker_prompt;
    worker_prompt.push_back(lex.recap);
    worker_prompt.insert(worker_prompt.end(), main_query.begin(), main_query.end());
    return worker_prompt;
}

inline std::vector<std::string> generated_actions(const Vocab& vocab, const Trajectory& traj) {
    std::vector<std::string> out;
    for (const auto& m : traj.messages)
        if (m.origin == Origin::generated) out.push_back(vocab.render(m.tokens));
    return out;
}

namespace detail {

inline std::optional<std::string> terminal_from_outcome(const ParseOutcome& out) {
    if (out.kind == ActionKind::final_answer) return out.answer;
    if (out.kind == ActionKind::summary_report && !out.report->conclusion.empty())
        return out.report->conclusion;
    return std::nullopt;
}

// Appends a tool-origin message, clipping the payload to the context budget.
// The closing frame token is always kept so transcripts stay well formed.
inline void append_tool_message(Trajectory& traj, const Lexicon& lex,
                                std::span<const TokenId> payload, int budget, int turn) {
    const int avail = budget - traj.total_tokens();
    if (avail < 2) { traj.truncated = true; return; }
    Message m;
    m.origin = Origin::tool;
    m.turn_index = turn;
    m.tokens.push_back(lex.tool_open);
    const int room = avail - 2;
    if (static_cast<int>(payload.size()) > room) traj.truncated = true;
    const std::size_t take = static_cast<std::size_t>(std::min<int>(room, static_cast<int>(payload.size())));
    m.tokens.insert(m.tokens.end(), payload.begin(), payload.begin() + static_cast<std::ptrdiff_t>(take));
    m.tokens.push_back(lex.tool_close);
    traj.messages.push_back(std::move(m));
}

inline void append_error_message(Trajectory& traj, const Lexicon& lex,
                                 std::initializer_list<TokenId> words, int budget, int turn) {
    std::vector<TokenId> payload(words);
    append_tool_message(traj, lex, payload, budget, turn);
}

struct AgentSetup {
    Role role = Role::worker;
    std::vector<TokenId> system_tokens;
    std::vector<TokenId> query_tokens;  // framed, ends with the role cue
    std::string main_query;             // recapped in the summary instruction
    std::set<std::string> tools;        // executable via the environment
};

} // namespace detail

// Tail-truncates the history until the summary instruction and one summary
// action fit, then samples that action without tools and extracts a terminal
// answer from it. The prompt prefix (leading system/query messages) is never
// dropped.
inline Trajectory force_final_summary(const ActionSampler& sampler, const ToolEnv& env,
                                      Trajectory traj, int budget, int max_action_tokens,
                                      const std::string& main_query, Rng& rng) {
    const Vocab& vocab = env.vocab();
    const Lexicon& lex = env.lexicon();

    std::vector<TokenId> instruction{lex.summarize};
    for (TokenId t : vocab.tokenize(main_query)) instruction.push_back(t);
    instruction.push_back(lex.summarize);

    std::size_t prefix = 0;
    while (prefix < traj.messages.size() &&
           (traj.messages[prefix].origin == Origin::system || traj.messages[prefix].origin == Origin::query))
        ++prefix;

    const int reserve = std::min(max_action_tokens, 8);
    const int need = static_cast<int>(instruction.size()) + reserve;
    while (traj.total_tokens() + need > budget && traj.messages.size() > prefix) {
        traj.messages.pop_back();
        traj.truncated = true;
    }
    if (traj.total_tokens() + static_cast<int>(instruction.size()) + 1 > budget)
        throw std::runtime_error("context budget cannot fit the summary instruction");

    const int turn = traj.messages.empty() ? 0 : traj.messages.back().turn_index + 1;
    traj.messages.push_back({Origin::query, std::move(instruction), turn});

    const int room = std::min(max_action_tokens, budget - traj.total_tokens());
    Context ctx{traj.context_tokens(), traj.role};
    std::vector<TokenId> action = sampler(ctx, room, rng);
    if (!action.empty()) {
        ParseOutcome out = parse_action(vocab.render(action));
        traj.terminal_answer = detail::terminal_from_outcome(out);
        traj.messages.push_back({Origin::generated, std::move(action), turn});
    }
    traj.truncated = true;
    return traj;
}

namespace detail {

// Shared single-agent loop: sample, parse, execute, observe; used for the
// standalone agent and for nested worker rollouts.
inline Trajectory run_agent(const ActionSampler& sampler, const ToolEnv& env,
                            const AgentSetup& setup, const RolloutLimits& limits,
                            bool summary_enabled, Rng& rng) {
    const Vocab& vocab = env.vocab();
    const Lexicon& lex = env.lexicon();

    Trajectory traj;
    traj.role = setup.role;
    traj.messages.push_back({Origin::system, setup.system_tokens, 0});
    traj.messages.push_back({Origin::query, setup.query_tokens, 0});
    if (traj.total_tokens() >= limits.context_budget)
        throw std::runtime_error("context budget smaller than the prompt");

    for (int turn = 1; turn <= limits.max_turns; ++turn) {
        const int room = std::min(limits.max_action_tokens,
                                  limits.context_budget - traj.total_tokens());
        if (room < 1) { traj.truncated = true; break; }

        Context ctx{traj.context_tokens(), traj.role};
        std::vector<TokenId> action = sampler(ctx, room, rng);
        if (action.empty()) break;
        ParseOutcome out = parse_action(vocab.render(action));
        traj.messages.push_back({Origin::generated, std::move(action), turn});

        if (auto terminal = terminal_from_outcome(out)) {
            traj.terminal_answer = terminal;
            return traj;
        }
        if (out.kind == ActionKind::tool_call && setup.tools.count(out.call->tool_name)) {
            ToolResponse resp = env.execute(*out.call, rng);
            append_tool_message(traj, lex, vocab.tokenize(resp.text), limits.context_budget, turn);
        } else if (out.kind == ActionKind::tool_call || out.kind == ActionKind::malformed) {
            append_error_message(traj, lex, {lex.w_error, lex.w_bad_tool_call},
                                 limits.context_budget, turn);
        } else {
            append_error_message(traj, lex, {lex.w_error, lex.w_failed},
                                 limits.context_budget, turn);
        }
    }

    traj.truncated = true;
    if (summary_enabled)
        traj = force_final_summary(sampler, env, std::move(traj), limits.context_budget,
                                   limits.max_action_tokens, setup.main_query, rng);
    return traj;
}

} // namespace detail

// Standalone multi-turn agent with the search/scrape toolset.
inline Trajectory run_single_agent(const ActionSampler& sampler, const ToolEnv& env,
                                   const std::string& query, const RolloutLimits& limits,
                                   Rng& rng, bool summary_enabled = true) {
    const Vocab& vocab = env.vocab();
    const Lexicon& lex = env.lexicon();
    detail::AgentSetup setup;
    setup.role = Role::worker;
    setup.system_tokens = {lex.sys_worker};
    setup.query_tokens.push_back(lex.query);
    for (TokenId t : vocab.tokenize(query)) setup.query_tokens.push_back(t);
    setup.query_tokens.push_back(lex.cue_worker);
    setup.main_query = query;
    setup.tools = {lex::kToolGoogleSearch, lex::kToolScrape};
    return detail::run_agent(sampler, env, setup, limits, summary_enabled, rng);
}

// Nested planner/worker rollout. The planner's only tool is the worker
// delegation; each delegation spawns a full worker rollout whose summary (or
// failure notice) comes back as a tool-origin message.
inline MultiTrajectory run_multi_agent(const ActionSampler& sampler, const ToolEnv& env,
                                       const std::string& query, const EngineConfig& config,
                                       Rng& rng) {
    const Vocab& vocab = env.vocab();
    const Lexicon& lex = env.lexicon();

    MultiTrajectory multi;
    multi.query = query;
    Trajectory& planner = multi.planner;
    planner.role = Role::planner;
    planner.messages.push_back({Origin::system, {lex.sys_planner}, 0});
    {
        Message q{Origin::query, {}, 0};
        q.tokens.push_back(lex.query);
        for (TokenId t : vocab.tokenize(query)) q.tokens.push_back(t);
        q.tokens.push_back(lex.cue_planner);
        planner.messages.push_back(std::move(q));
    }
    if (planner.total_tokens() >= config.planner.context_budget)
        throw std::runtime_error("planner context budget smaller than the prompt");

    const std::vector<TokenId> main_query_tokens = vocab.tokenize(query);

    for (int turn = 1; turn <= config.planner.max_turns; ++turn) {
        const int room = std::min(config.planner.max_action_tokens,
                                  config.planner.context_budget - planner.total_tokens());
        if (room < 1) { planner.truncated = true; break; }

        Context ctx{planner.context_tokens(), Role::planner};
        std::vector<TokenId> action = sampler(ctx, room, rng);
        if (action.empty()) break;
        ParseOutcome out = parse_action(vocab.render(action));
        planner.messages.push_back({Origin::generated, std::move(action), turn});

        if (auto terminal = detail::terminal_from_outcome(out)) {
            planner.terminal_answer = terminal;
            multi.final_answer = terminal;
            return multi;
        }

        std::optional<std::string> subtask;
        if (out.kind == ActionKind::tool_call && out.call->tool_name == lex::kToolDelegate)
            subtask = extract_subtask(*out.call);

        if (subtask) {
            detail::AgentSetup worker_setup;
            worker_setup.role = Role::worker;
            worker_setup.system_tokens = {lex.sys_worker};
            if (config.recap)
                worker_setup.system_tokens =
                    user_query_recap(std::move(worker_setup.system_tokens), main_query_tokens, lex);
            worker_setup.query_tokens.push_back(lex.query);
            for (TokenId t : vocab.tokenize(*subtask)) worker_setup.query_tokens.push_back(t);
            worker_setup.query_tokens.push_back(lex.cue_worker);
            worker_setup.main_query = query;
            worker_setup.tools = {lex::kToolGoogleSearch, lex::kToolScrape};

            Rng worker_rng = rng.fork(static_cast<std::uint64_t>(turn));
            Trajectory worker = detail::run_agent(sampler, env, worker_setup, config.worker,
                                                  config.summary, worker_rng);
            worker.subtask_query = *subtask;

            std::vector<TokenId> reply;
            if (worker.terminal_answer) {
                reply.push_back(lex.w_answer);
                reply.push_back(lex.w_is);
                for (TokenId t : vocab.tokenize(*worker.terminal_answer)) reply.push_back(t);
            } else if (!config.summary) {
                // Without the summary channel the planner consumes the raw
                // final block of the worker.
                for (auto it = worker.messages.rbegin(); it != worker.messages.rend(); ++it) {
                    if (it->origin == Origin::generated) { reply = it->tokens; break; }
                }
                while (!reply.empty() && reply.back() == lex.eoa) reply.pop_back();
                if (reply.empty()) reply = {lex.w_error, lex.w_failed};
            } else {
                reply = {lex.w_error, lex.w_failed};
            }
            detail::append_tool_message(planner, lex, reply, config.planner.context_budget, turn);
            multi.workers.push_back(std::move(worker));
        } else if (out.kind == ActionKind::tool_call || out.kind == ActionKind::malformed) {
            detail::append_error_message(planner, lex, {lex.w_error, lex.w_bad_tool_call},
                                         config.planner.context_budget, turn);
        } else {
            detail::append_error_message(planner, lex, {lex.w_error, lex.w_failed},
                                         config.planner.context_budget, turn);
        }
    }

    planner.truncated = true;
    if (config.summary) {
        planner = force_final_summary(sampler, env, std::move(planner),
                                      config.planner.context_budget,
                                      config.planner.max_action_tokens, query, rng);
        multi.final_answer = planner.terminal_answer;
    }
    return multi;
}

} // namespace matpo
