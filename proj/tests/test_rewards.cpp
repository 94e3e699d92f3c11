#include <catch2/catch_amalgamated.hpp>

#include <vector>

#include "matpo/env.hpp"
#include "matpo/rewards.hpp"
#include "matpo/rollout.hpp"

using namespace matpo;

TEST_CASE("default judge: normalized string equivalence") {
    REQUIRE(judge_normalized(std::optional<std::string>("competent"), "competent") == 1);
    REQUIRE(judge_normalized(std::optional<std::string>("  Competent. "), "competent") == 1);
    REQUIRE(judge_normalized(std::optional<std::string>("a  b"), "A B") == 1);
    REQUIRE(judge_normalized(std::nullopt, "anything") == 0);
    // word order matters for the strict normalizer...
    REQUIRE(judge_normalized(std::optional<std::string>("sasha and malia obama"),
                             "Malia Obama and Sasha Obama") == 0);
    // ...but not for the token-set judge
    REQUIRE(judge_token_set(std::optional<std::string>("sasha and malia obama"),
                            "Malia Obama and Sasha Obama") == 1);
    REQUIRE(judge_token_set(std::optional<std::string>("sasha and susan"),
                            "Malia Obama and Sasha Obama") == 0);
    REQUIRE(make_judge("normalized")(std::optional<std::string>("x"), "x") == 1);
    REQUIRE_THROWS_AS(make_judge("gpt"), std::invalid_argument);
}

TEST_CASE("composite reward arithmetic") {
    std::vector<double> two{1.0, 0.0};
    RewardBreakdown r = composite_reward(1, 1.0, two);
    REQUIRE(r.fmt == 0.75);
    REQUIRE_THAT(r.reward, Catch::Matchers::WithinAbs(0.975, 1e-15));

    RewardBreakdown empty = composite_reward(0, 0.0, {});
    REQUIRE(empty.fmt == 0.5);  // no workers: fmt_w defaults to 1
    REQUIRE_THAT(empty.reward, Catch::Matchers::WithinAbs(0.05, 1e-15));

    std::vector<double> ones{1.0, 1.0, 1.0};
    RewardBreakdown full = composite_reward(1, 1.0, ones);
    REQUIRE(full.reward == 1.0);

    REQUIRE_THROWS_AS(composite_reward(2, 1.0, {}), std::invalid_argument);
    REQUIRE_THROWS_AS(composite_reward(1, 1.5, {}), std::invalid_argument);
}

TEST_CASE("reward is monotone in acc and fmt") {
    for (double fmt_p : {0.0, 0.3, 1.0}) {
        std::vector<double> w{fmt_p};
        REQUIRE(composite_reward(1, fmt_p, w).reward > composite_reward(0, fmt_p, w).reward);
    }
    for (int acc : {0, 1}) {
        std::vector<double> lo_w{0.2}, hi_w{0.9};
        REQUIRE(composite_reward(acc, 0.9, hi_w).reward > composite_reward(acc, 0.2, lo_w).reward);
    }
}

TEST_CASE("group advantages standardize with population std") {
    std::vector<double> rewards{1.0, 0.0};
    auto adv = group_advantages(rewards);
    REQUIRE_THAT(adv[0], Catch::Matchers::WithinAbs(1.0, 1e-12));
    REQUIRE_THAT(adv[1], Catch::Matchers::WithinAbs(-1.0, 1e-12));

    std::vector<double> equal{0.4, 0.4, 0.4, 0.4};
    for (double a : group_advantages(equal)) REQUIRE(a == 0.0);

    std::vector<double> one{0.5};
    REQUIRE_THROWS_AS(group_advantages(one), std::invalid_argument);
}

TEST_CASE("group advantages: mean zero, unit variance, permutation equivariance") {
    Rng rng(5);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> rewards;
        const int g = 2 + static_cast<int>(rng.below(14));
        for (int i = 0; i < g; ++i) rewards.push_back(rng.uniform01());
        auto adv = group_advantages(rewards);
        double mean = 0.0, var = 0.0;
        for (double a : adv) mean += a;
        mean /= g;
        for (double a : adv) var += (a - mean) * (a - mean);
        var /= g;
        REQUIRE_THAT(mean, Catch::Matchers::WithinAbs(0.0, 1e-9));
        REQUIRE_THAT(var, Catch::Matchers::WithinAbs(1.0, 1e-9));

        std::vector<double> rotated(rewards.begin() + 1, rewards.end());
        rotated.push_back(rewards.front());
        auto adv_rot = group_advantages(rotated);
        for (int i = 0; i + 1 < g; ++i) REQUIRE(adv_rot[static_cast<std::size_t>(i)] == adv[static_cast<std::size_t>(i + 1)]);
        REQUIRE(adv_rot.back() == adv.front());
    }
}

TEST_CASE("advantages are exactly invariant to dyadic shift and scaling") {
    // dyadic rewards and dyadic transforms keep every operation exact in
    // binary floating point, so equality is bitwise
    std::vector<double> rewards{0.0, 0.5, 1.0, 0.25, 0.75, 1.0, 0.0, 0.5};
    auto base = group_advantages(rewards);
    for (double shift : {1.0, 0.25, -2.0, 1024.0}) {
        std::vector<double> shifted;
        for (double r : rewards) shifted.push_back(r + shift);
        REQUIRE(group_advantages(shifted) == base);
    }
    for (double scale : {2.0, 0.5, 8.0, 0.125}) {
        std::vector<double> scaled;
        for (double r : rewards) scaled.push_back(r * scale);
        REQUIRE(group_advantages(scaled) == base);
    }
}

TEST_CASE("advantages are invariant to arbitrary shift and positive scaling within 1e-12") {
    Rng rng(6);
    for (int rep = 0; rep < 30; ++rep) {
        std::vector<double> rewards;
        for (int i = 0; i < 8; ++i) rewards.push_back(rng.uniform01());
        auto base = group_advantages(rewards);
        const double shift = rng.uniform01() * 10.0 - 5.0;
        const double scale = rng.uniform01() * 4.0 + 0.1;
        std::vector<double> moved;
        for (double r : rewards) moved.push_back(r * scale + shift);
        auto adv = group_advantages(moved);
        for (std::size_t i = 0; i < adv.size(); ++i)
            REQUIRE_THAT(adv[i], Catch::Matchers::WithinAbs(base[i], 1e-12));
    }
}

namespace {

MultiTrajectory make_rollout(const Vocab& vocab, const Lexicon& lex, int workers,
                             int planner_tokens, int worker_tokens) {
    MultiTrajectory m;
    m.planner.role = Role::planner;
    m.planner.messages.push_back({Origin::system, {lex.sys_planner}, 0});
    m.planner.messages.push_back(
        {Origin::generated, std::vector<TokenId>(static_cast<std::size_t>(planner_tokens), lex.w_top), 1});
    for (int i = 0; i < workers; ++i) {
        Trajectory w;
        w.role = Role::worker;
        w.messages.push_back({Origin::system, {lex.sys_worker}, 0});
        w.messages.push_back(
            {Origin::generated, std::vector<TokenId>(static_cast<std::size_t>(worker_tokens), lex.w_next), 1});
        m.workers.push_back(std::move(w));
    }
    (void)vocab;
    return m;
}

} // namespace

TEST_CASE("broadcast emits one row per trajectory with the shared advantage") {
    Vocab vocab = make_default_vocab();
    Lexicon lex(vocab);
    MultiTrajectory a = make_rollout(vocab, lex, 2, 4, 3);
    MultiTrajectory b = make_rollout(vocab, lex, 0, 5, 0);
    std::vector<const MultiTrajectory*> group{&a, &b};
    std::vector<double> adv{0.7, -0.7};
    AugmentedBatch batch = broadcast_advantages(group, adv);

    REQUIRE(batch.rows.size() == 4);  // planner+2 workers, planner
    REQUIRE(batch.family_count == 2);
    REQUIRE(batch.family_token_totals[0] == 4 + 3 + 3);
    REQUIRE(batch.family_token_totals[1] == 5);
    for (const auto& row : batch.rows) {
        const double expect = row.family_id == 0 ? 0.7 : -0.7;
        REQUIRE(row.advantage == expect);
    }

    // broadcast conservation: sum of (1 + T_i)
    std::size_t expected_rows = 0;
    for (const auto* m : group) expected_rows += 1 + m->workers.size();
    REQUIRE(batch.rows.size() == expected_rows);

    std::vector<double> bad{0.7};
    REQUIRE_THROWS_AS(broadcast_advantages(group, bad), std::invalid_argument);
}

TEST_CASE("zero-advantage groups still emit rows") {
    Vocab vocab = make_default_vocab();
    Lexicon lex(vocab);
    MultiTrajectory a = make_rollout(vocab, lex, 1, 2, 2);
    MultiTrajectory b = make_rollout(vocab, lex, 1, 2, 2);
    std::vector<const MultiTrajectory*> group{&a, &b};
    std::vector<double> adv = group_advantages(std::vector<double>{0.5, 0.5});
    AugmentedBatch batch = broadcast_advantages(group, adv);
    REQUIRE(batch.rows.size() == 4);
    for (const auto& row : batch.rows) REQUIRE(row.advantage == 0.0);
}

TEST_CASE("rollout scoring wires fmt per role") {
    Vocab vocab = make_default_vocab();
    Lexicon lex(vocab);
    auto [corpus, task] = generate_task(vocab, lex, 3, 1);
    ToolEnv env(vocab, lex, std::move(corpus), Blocklist::defaults());
    TokenId entity = vocab.tokenize(task.query).back();
    TokenId answer = vocab.require(task.gold_answer);
    Rng rng(1);
    // planner: one failed call (search is unregistered for planners), one
    // delegation; worker: one good search then the boxed answer
    auto sampler = scripted_sampler({
        {lex.call_search, entity, lex.call_end, lex.eoa},
        {lex.call_delegate, entity, lex.call_end, lex.eoa},
        {lex.call_search, entity, lex.call_end, lex.eoa},
        {lex.box_open, answer, lex.box_close, lex.eoa},
        {lex.box_open, answer, lex.box_close, lex.eoa},
    });
    MultiTrajectory multi = run_multi_agent(sampler, env, task.query, {}, rng);
    RewardBreakdown r = score_rollout(vocab, multi, judge_normalized, task.gold_answer);
    REQUIRE(r.acc == 1);
    REQUIRE(r.fmt_p == 0.5);  // one failed, one valid delegation
    REQUIRE(r.fmt_w_values == std::vector<double>{1.0});
    REQUIRE_THAT(r.reward, Catch::Matchers::WithinAbs(0.9 + 0.1 * 0.75, 1e-12));
}
