#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "matpo/env.hpp"
#include "matpo/rollout.hpp"

using namespace matpo;

namespace {

struct Fixture {
    Vocab vocab = make_default_vocab();
    Lexicon lexicon{vocab};
    Corpus corpus;
    TaskInstance task;

    explicit Fixture(std::uint64_t seed = 7, int hops = 1) {
        auto [c, t] = generate_task(vocab, lexicon, seed, hops);
        corpus = std::move(c);
        task = t;
    }

    ToolEnv env(NoiseConfig noise = {}) const {
        return ToolEnv(vocab, lexicon, corpus, Blocklist::defaults(), noise);
    }

    TokenId entity() const { return vocab.tokenize(task.query).back(); }
    TokenId answer() const { return vocab.require(task.gold_answer); }

    std::vector<TokenId> search(TokenId term) const {
        return {lexicon.call_search, term, lexicon.call_end, lexicon.eoa};
    }
    std::vector<TokenId> scrape(TokenId url) const {
        return {lexicon.call_scrape, url, lexicon.call_end, lexicon.eoa};
    }
    std::vector<TokenId> delegate(TokenId term) const {
        return {lexicon.call_delegate, term, lexicon.call_end, lexicon.eoa};
    }
    std::vector<TokenId> box(TokenId ans) const {
        return {lexicon.box_open, ans, lexicon.box_close, lexicon.eoa};
    }
    std::vector<TokenId> report(TokenId ans) const {
        return {lexicon.report_open, ans, lexicon.report_close, lexicon.eoa};
    }
    std::vector<TokenId> babble() const {
        return {lexicon.w_next, lexicon.w_top, lexicon.eoa};
    }
};

int count_origin(const Trajectory& t, Origin o) {
    int n = 0;
    for (const auto& m : t.messages) n += (m.origin == o);
    return n;
}

} // namespace

TEST_CASE("immediate boxed answer ends the rollout at turn one") {
    Fixture fx;
    ToolEnv env = fx.env();
    Rng rng(1);
    auto sampler = scripted_sampler({fx.box(fx.answer())});
    Trajectory traj = run_single_agent(sampler, env, fx.task.query, {6, 2048, 128}, rng);
    REQUIRE(traj.terminal_answer == fx.task.gold_answer);
    REQUIRE_FALSE(traj.truncated);
    REQUIRE(count_origin(traj, Origin::generated) == 1);
    REQUIRE(count_origin(traj, Origin::tool) == 0);
}

TEST_CASE("single-hop trace alternates generated and tool messages") {
    Fixture fx;
    ToolEnv env = fx.env();
    Rng rng(2);
    auto sampler = scripted_sampler({fx.search(fx.entity()), fx.box(fx.answer())});
    Trajectory traj = run_single_agent(sampler, env, fx.task.query, {6, 2048, 128}, rng);
    REQUIRE(traj.messages.size() == 5);  // system, query, gen, tool, gen
    REQUIRE(traj.messages[2].origin == Origin::generated);
    REQUIRE(traj.messages[3].origin == Origin::tool);
    REQUIRE(traj.messages[4].origin == Origin::generated);
    REQUIRE(traj.terminal_answer == fx.task.gold_answer);

    // the search response carries the tail snippet with the answer
    const auto& tool_msg = traj.messages[3].tokens;
    REQUIRE(tool_msg.front() == fx.lexicon.tool_open);
    REQUIRE(tool_msg.back() == fx.lexicon.tool_close);
    REQUIRE(tool_msg[tool_msg.size() - 2] == fx.answer());
}

TEST_CASE("turn exhaustion triggers the forced summary") {
    Fixture fx;
    ToolEnv env = fx.env();
    Rng rng(3);
    auto sampler = scripted_sampler(
        {fx.babble(), fx.babble(), fx.babble(), fx.report(fx.answer())});
    Trajectory traj = run_single_agent(sampler, env, fx.task.query, {3, 2048, 128}, rng);
    REQUIRE(traj.truncated);
    REQUIRE(traj.terminal_answer == fx.task.gold_answer);
    // the summary instruction is a query-origin message carrying the query
    const auto& instr = traj.messages[traj.messages.size() - 2];
    REQUIRE(instr.origin == Origin::query);
    REQUIRE(instr.tokens.front() == fx.lexicon.summarize);
    bool has_entity = false;
    for (TokenId t : instr.tokens) has_entity |= (t == fx.entity());
    REQUIRE(has_entity);
}

TEST_CASE("summary can be disabled") {
    Fixture fx;
    ToolEnv env = fx.env();
    Rng rng(4);
    auto sampler = scripted_sampler({fx.babble(), fx.babble(), fx.babble()});
    Trajectory traj =
        run_single_agent(sampler, env, fx.task.query, {3, 2048, 128}, rng, /*summary=*/false);
    REQUIRE(traj.truncated);
    REQUIRE_FALSE(traj.terminal_answer.has_value());
}

TEST_CASE("planner delegating twice then answering yields two workers") {
    Fixture fx;
    ToolEnv env = fx.env();
    Rng rng(5);
    // planner: delegate, (worker: search, box), delegate, (worker: box), box
    auto sampler = scripted_sampler({
        fx.delegate(fx.entity()),
        fx.search(fx.entity()), fx.box(fx.answer()),
        fx.delegate(fx.entity()),
        fx.box(fx.answer()),
        fx.box(fx.answer()),
    });
    EngineConfig cfg;
    MultiTrajectory multi = run_multi_agent(sampler, env, fx.task.query, cfg, rng);
    REQUIRE(multi.workers.size() == 2);
    REQUIRE(multi.final_answer == fx.task.gold_answer);
    REQUIRE(multi.planner.role == Role::planner);
    for (const auto& w : multi.workers) {
        REQUIRE(w.role == Role::worker);
        REQUIRE(w.terminal_answer == fx.task.gold_answer);
    }
    // worker replies arrive as [answer is <ans>] tool messages
    const auto& reply = multi.planner.messages[3].tokens;
    REQUIRE(reply[1] == fx.lexicon.w_answer);
    REQUIRE(reply[2] == fx.lexicon.w_is);
    REQUIRE(reply[3] == fx.answer());
}

TEST_CASE("planner answering immediately spawns no workers") {
    Fixture fx;
    ToolEnv env = fx.env();
    Rng rng(6);
    auto sampler = scripted_sampler({fx.box(fx.answer())});
    MultiTrajectory multi = run_multi_agent(sampler, env, fx.task.query, {}, rng);
    REQUIRE(multi.workers.empty());
    REQUIRE(multi.final_answer == fx.task.gold_answer);
}

TEST_CASE("nesting soundness: worker subtask equals the parsed delegation argument") {
    Fixture fx;
    ToolEnv env = fx.env();
    Rng rng(7);
    auto sampler = scripted_sampler({
        fx.delegate(fx.entity()),
        fx.box(fx.answer()),
        fx.box(fx.answer()),
    });
    MultiTrajectory multi = run_multi_agent(sampler, env, fx.task.query, {}, rng);
    REQUIRE(multi.workers.size() == 1);
    ParseOutcome out = parse_action(fx.vocab.render(multi.planner.messages[2].tokens));
    REQUIRE(out.kind == ActionKind::tool_call);
    REQUIRE(multi.workers[0].subtask_query == extract_subtask(*out.call));
}

TEST_CASE("worker without an answer reports failure through the summary channel") {
    Fixture fx;
    ToolEnv env = fx.env();
    Rng rng(8);
    EngineConfig cfg;
    cfg.worker.max_turns = 1;
    // worker babbles, summary is malformed noise -> no terminal answer
    auto sampler = scripted_sampler({
        fx.delegate(fx.entity()),
        fx.babble(), fx.babble(),
        fx.box(fx.answer()),
    });
    MultiTrajectory multi = run_multi_agent(sampler, env, fx.task.query, cfg, rng);
    REQUIRE(multi.workers.size() == 1);
    REQUIRE_FALSE(multi.workers[0].terminal_answer.has_value());
    const auto& reply = multi.planner.messages[3].tokens;
    REQUIRE(reply[1] == fx.lexicon.w_error);
    // raw worker output never reaches the planner when summaries are on
    REQUIRE(multi.final_answer == fx.task.gold_answer);
}

TEST_CASE("without the summary channel the planner consumes the raw final block") {
    Fixture fx;
    ToolEnv env = fx.env();
    Rng rng(9);
    EngineConfig cfg;
    cfg.summary = false;
    cfg.worker.max_turns = 1;
    auto sampler = scripted_sampler({
        fx.delegate(fx.entity()),
        fx.babble(),
        fx.box(fx.answer()),
    });
    MultiTrajectory multi = run_multi_agent(sampler, env, fx.task.query, cfg, rng);
    REQUIRE(multi.workers.size() == 1);
    const auto& reply = multi.planner.messages[3].tokens;
    // raw babble tokens, framed as a tool message
    REQUIRE(reply[1] == fx.lexicon.w_next);
    REQUIRE(reply[2] == fx.lexicon.w_top);
}

TEST_CASE("planner tool calls other than delegation are rejected as failed calls") {
    Fixture fx;
    ToolEnv env = fx.env();
    Rng rng(10);
    auto sampler = scripted_sampler({
        fx.search(fx.entity()),  // not in the planner toolset
        fx.box(fx.answer()),
    });
    MultiTrajectory multi = run_multi_agent(sampler, env, fx.task.query, {}, rng);
    REQUIRE(multi.workers.empty());
    const auto& nudge = multi.planner.messages[3].tokens;
    REQUIRE(nudge[1] == fx.lexicon.w_error);
    REQUIRE(nudge[2] == fx.lexicon.w_bad_tool_call);
    REQUIRE(multi.final_answer == fx.task.gold_answer);
}

TEST_CASE("token mask marks exactly the generated tokens") {
    Trajectory traj;
    traj.messages.push_back({Origin::system, {1, 2}, 0});
    traj.messages.push_back({Origin::query, {3, 4, 5}, 0});
    traj.messages.push_back({Origin::generated, {6, 7, 8, 9, 10}, 1});
    traj.messages.push_back({Origin::tool, {1, 2, 3, 4, 5, 6, 7}, 1});
    traj.messages.push_back({Origin::generated, {8, 9, 10}, 2});
    auto mask = token_mask(traj);
    REQUIRE(mask.size() == 20);
    long ones = 0;
    for (auto b : mask) ones += b;
    REQUIRE(ones == 8);
    REQUIRE(ones == masked_token_count(traj));

    Trajectory all_gen;
    all_gen.messages.push_back({Origin::generated, {1, 2, 3}, 1});
    auto mask2 = token_mask(all_gen);
    REQUIRE(mask2 == std::vector<std::uint8_t>{1, 1, 1});
}

TEST_CASE("mask total equals the sum of generated message lengths") {
    Fixture fx;
    ToolEnv env = fx.env();
    Rng rng(11);
    auto sampler = scripted_sampler({fx.search(fx.entity()), fx.babble(), fx.box(fx.answer())});
    Trajectory traj = run_single_agent(sampler, env, fx.task.query, {6, 2048, 128}, rng);
    long expect = 0;
    for (const auto& m : traj.messages)
        if (m.origin == Origin::generated) expect += static_cast<long>(m.tokens.size());
    auto mask = token_mask(traj);
    long ones = 0;
    for (auto b : mask) ones += b;
    REQUIRE(ones == expect);
}

TEST_CASE("user query recap is present, verbatim and idempotent") {
    Fixture fx;
    std::vector<TokenId> q = fx.vocab.tokenize(fx.task.query);
    std::vector<TokenId> prompt{fx.lexicon.sys_worker};
    auto once = user_query_recap(prompt, q, fx.lexicon);
    REQUIRE(once.size() == 2 + q.size());
    REQUIRE(once[1] == fx.lexicon.recap);
    for (std::size_t i = 0; i < q.size(); ++i) REQUIRE(once[2 + i] == q[i]);
    auto twice = user_query_recap(once, q, fx.lexicon);
    REQUIRE(twice == once);
}

TEST_CASE("recap toggle controls the worker prompt") {
    Fixture fx;
    ToolEnv env = fx.env();
    auto script = [&fx]() {
        return scripted_sampler({
            fx.delegate(fx.entity()),
            fx.box(fx.answer()),
            fx.box(fx.answer()),
        });
    };
    EngineConfig with;
    EngineConfig without;
    without.recap = false;
    Rng r1(12), r2(12);
    auto s1 = script();
    auto s2 = script();
    MultiTrajectory m1 = run_multi_agent(s1, env, fx.task.query, with, r1);
    MultiTrajectory m2 = run_multi_agent(s2, env, fx.task.query, without, r2);
    auto has_recap = [&](const MultiTrajectory& m) {
        for (TokenId t : m.workers.at(0).messages.at(0).tokens)
            if (t == fx.lexicon.recap) return true;
        return false;
    };
    REQUIRE(has_recap(m1));
    REQUIRE_FALSE(has_recap(m2));
}

TEST_CASE("forced summary drops from the tail and keeps the prompt prefix") {
    Fixture fx;
    ToolEnv env = fx.env();
    Rng rng(13);
    // build an over-budget trajectory by hand
    Trajectory traj;
    traj.role = Role::worker;
    traj.messages.push_back({Origin::system, {fx.lexicon.sys_worker}, 0});
    traj.messages.push_back({Origin::query, {fx.lexicon.query, fx.entity(), fx.lexicon.cue_worker}, 0});
    for (int turn = 1; turn <= 4; ++turn) {
        traj.messages.push_back({Origin::generated, fx.search(fx.entity()), turn});
        traj.messages.push_back(
            {Origin::tool, std::vector<TokenId>(10, fx.lexicon.noise_pool[0]), turn});
    }
    const int budget = 30;  // prompt(4) + instruction(7) + reserve
    auto sampler = scripted_sampler({fx.report(fx.answer())});
    Trajectory out = force_final_summary(sampler, env, traj, budget, 128, fx.task.query, rng);
    REQUIRE(out.truncated);
    REQUIRE(out.total_tokens() <= budget);
    REQUIRE(out.messages[0].origin == Origin::system);
    REQUIRE(out.messages[1].origin == Origin::query);
    REQUIRE(out.terminal_answer == fx.task.gold_answer);

    // under-budget trajectories keep all messages
    Trajectory small;
    small.role = Role::worker;
    small.messages.push_back({Origin::system, {fx.lexicon.sys_worker}, 0});
    small.messages.push_back({Origin::query, {fx.lexicon.query, fx.entity(), fx.lexicon.cue_worker}, 0});
    small.messages.push_back({Origin::generated, fx.babble(), 1});
    const std::size_t before = small.messages.size();
    auto sampler2 = scripted_sampler({fx.report(fx.answer())});
    Rng rng2(14);
    Trajectory out2 = force_final_summary(sampler2, env, small, 2048, 128, fx.task.query, rng2);
    REQUIRE(out2.messages.size() == before + 2);  // instruction + summary action

    // a budget too small even for the prompt and instruction is a hard error
    auto sampler3 = scripted_sampler({fx.report(fx.answer())});
    Rng rng3(15);
    REQUIRE_THROWS_AS(
        force_final_summary(sampler3, env, small, 8, 128, fx.task.query, rng3),
        std::runtime_error);
}

TEST_CASE("budget safety holds for random policies") {
    Fixture fx(9, 2);
    ToolEnv env = fx.env(NoiseConfig{1.0, 4.0, 0.0});
    FeatureSpec spec;
    PolicyParams params = PolicyParams::zeros(spec, fx.vocab);
    Rng wrng(16);
    for (double& w : params.weights) w = wrng.uniform01() - 0.5;
    ActionSampler sampler = policy_sampler(params, fx.vocab);
    EngineConfig cfg;
    cfg.planner = {4, 160, 24};
    cfg.worker = {4, 192, 24};
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        Rng rng(seed);
        MultiTrajectory multi = run_multi_agent(sampler, env, fx.task.query, cfg, rng);
        REQUIRE(multi.planner.total_tokens() <= cfg.planner.context_budget);
        for (const auto& w : multi.workers)
            REQUIRE(w.total_tokens() <= cfg.worker.context_budget);
    }
}

TEST_CASE("identical seeds reproduce the rollout exactly") {
    Fixture fx(10, 2);
    ToolEnv env = fx.env(NoiseConfig{0.5, 4.0, 0.1});
    FeatureSpec spec;
    PolicyParams params = PolicyParams::zeros(spec, fx.vocab);
    Rng wrng(17);
    for (double& w : params.weights) w = wrng.uniform01() - 0.5;
    ActionSampler sampler = policy_sampler(params, fx.vocab);
    EngineConfig cfg;
    cfg.planner = {4, 512, 24};
    cfg.worker = {5, 512, 24};
    Rng r1(99), r2(99);
    MultiTrajectory a = run_multi_agent(sampler, env, fx.task.query, cfg, r1);
    MultiTrajectory b = run_multi_agent(sampler, env, fx.task.query, cfg, r2);
    REQUIRE(a.final_answer == b.final_answer);
    REQUIRE(a.workers.size() == b.workers.size());
    REQUIRE(a.planner.messages.size() == b.planner.messages.size());
    for (std::size_t i = 0; i < a.planner.messages.size(); ++i)
        REQUIRE(a.planner.messages[i].tokens == b.planner.messages[i].tokens);
    for (std::size_t w = 0; w < a.workers.size(); ++w) {
        REQUIRE(a.workers[w].messages.size() == b.workers[w].messages.size());
        for (std::size_t i = 0; i < a.workers[w].messages.size(); ++i)
            REQUIRE(a.workers[w].messages[i].tokens == b.workers[w].messages[i].tokens);
    }
}

TEST_CASE("planner messages contain only worker summaries, never raw tool text") {
    Fixture fx(11, 2);
    ToolEnv env = fx.env(NoiseConfig{1.0, 4.0, 0.0});
    Rng rng(18);
    auto sampler = scripted_sampler({
        fx.delegate(fx.entity()),
        fx.search(fx.entity()), fx.search(fx.entity()), fx.box(fx.answer()),
        fx.box(fx.answer()),
    });
    MultiTrajectory multi = run_multi_agent(sampler, env, fx.task.query, {}, rng);
    REQUIRE(multi.workers.size() == 1);
    // worker context grew under noise; the planner reply stayed summary-sized
    for (const auto& m : multi.planner.messages)
        if (m.origin == Origin::tool) REQUIRE(m.tokens.size() <= 8);
}
