#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "matpo/grammar.hpp"
#include "matpo/rollout.hpp"
#include "matpo/vocab.hpp"

namespace matpo {

// Composite verifiable reward of one full rollout:
//   fmt    = 0.5 * fmt_p + 0.5 * mean(fmt_w)   (fmt_w := 1 with no workers)
//   reward = 0.9 * acc + 0.1 * fmt
struct RewardBreakdown {
    int acc = 0;
    double fmt_p = 1.0;
    std::vector<double> fmt_w_values;
    double fmt = 1.0;
    double reward = 0.0;
};

namespace detail {

inline std::string normalize_answer(std::string_view s) {
    std::string out;
    for (char c : s) {
        unsigned char u = static_cast<unsigned char>(c);
        if (std::isspace(u)) {
            if (!out.empty() && out.back() != ' ') out += ' ';
        } else {
            out += static_cast<char>(std::tolower(u));
        }
    }
    auto is_punct = [](char c) {
        return c == '.' || c == ',' || c == '!' || c == '?' || c == ';' || c == ':' ||
               c == '"' || c == '\'' || c == '(' || c == ')' || c == '[' || c == ']';
    };
    std::size_t a = 0, b = out.size();
    while (a < b && (out[a] == ' ' || is_punct(out[a]))) ++a;
    while (b > a && (out[b - 1] == ' ' || is_punct(out[b - 1]))) --b;
    return out.substr(a, b - a);
}

} // namespace detail

using Judge = std::function<int(const std::optional<std::string>&, const std::string&)>;

// Default verifier: normalized string equivalence (case fold, trim, collapse
// whitespace, strip surrounding punctuation). Absent answers score 0.
inline int judge_normalized(const std::optional<std::string>& answer, const std::string& gold) {
    if (!answer) return 0;
    return detail::normalize_answer(*answer) == detail::normalize_answer(gold) ? 1 : 0;
}

// Order-insensitive variant: equality of normalized word sets. Accepts
// reorderings such as "sasha and malia obama" vs "Malia Obama and Sasha Obama".
inline int judge_token_set(const std::optional<std::string>& answer, const std::string& gold) {
    if (!answer) return 0;
    auto words = [](const std::string& s) {
        std::set<std::string> out;
        std::string cur;
        for (char c : detail::normalize_answer(s)) {
            if (c == ' ') {
                if (!cur.empty()) out.insert(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        if (!cur.empty()) out.insert(cur);
        return out;
    };
    return words(*answer) == words(gold) ? 1 : 0;
}

inline Judge make_judge(const std::string& name) {
    if (name == "normalized") return judge_normalized;
    if (name == "token_set") return judge_token_set;
    throw std::invalid_argument("unknown judge: " + name);
}

inline RewardBreakdown composite_reward(int acc, double fmt_p, std::span<const double> fmt_w_values) {
    if (acc != 0 && acc != 1) throw std::invalid_argument("acc must be 0 or 1");
    if (fmt_p < 0.0 || fmt_p > 1.0) throw std::invalid_argument("fmt_p out of range");
    for (double v : fmt_w_values)
        if (v < 0.0 || v > 1.0) throw std::invalid_argument("fmt_w out of range");
    RewardBreakdown out;
    out.acc = acc;
    out.fmt_p = fmt_p;
    out.fmt_w_values.assign(fmt_w_values.begin(), fmt_w_values.end());
    double fmt_w = 1.0;
    if (!out.fmt_w_values.empty()) {
        fmt_w = 0.0;
        for (double v : out.fmt_w_values) fmt_w += v;
        fmt_w /= static_cast<double>(out.fmt_w_values.size());
    }
    out.fmt = 0.5 * fmt_p + 0.5 * fmt_w;
    out.reward = 0.9 * acc + 0.1 * out.fmt;
    return out;
}

inline const std::set<std::string>& planner_tools() {
    static const std::set<std::string> tools{lex::kToolDelegate};
    return tools;
}

inline const std::set<std::string>& worker_tools() {
    static const std::set<std::string> tools{lex::kToolGoogleSearch, lex::kToolScrape};
    return tools;
}

inline double fmt_for_trajectory(const Vocab& vocab, const Trajectory& traj) {
    const auto actions = generated_actions(vocab, traj);
    const auto& tools = traj.role == Role::planner ? planner_tools() : worker_tools();
    return format_score(actions, tools);
}

inline RewardBreakdown score_rollout(const Vocab& vocab, const MultiTrajectory& multi,
                                     const Judge& judge, const std::string& gold) {
    std::vector<double> fmt_w;
    for (const auto& w : multi.workers) fmt_w.push_back(fmt_for_trajectory(vocab, w));
    return composite_reward(judge(multi.final_answer, gold),
                            fmt_for_trajectory(vocab, multi.planner), fmt_w);
}

// Group-relative standard scores over the G rewards of one query's rollouts.
// Population std; groups with std below eps_std get all-zero advantages so a
// degenerate group can never produce NaNs.
inline std::vector<double> group_advantages(std::span<const double> rewards, double eps_std = 1e-6) {
    const std::size_t g = rewards.size();
    if (g < 2) throw std::invalid_argument("group size must be >= 2");
    // Sums run over sorted copies so the statistics are bitwise identical
    // under any permutation of the group.
    std::vector<double> sorted(rewards.begin(), rewards.end());
    std::sort(sorted.begin(), sorted.end());
    double mean = 0.0;
    for (double r : sorted) mean += r;
    mean /= static_cast<double>(g);
    std::vector<double> sq(g);
    for (std::size_t i = 0; i < g; ++i) sq[i] = (sorted[i] - mean) * (sorted[i] - mean);
    std::sort(sq.begin(), sq.end());
    double var = 0.0;
    for (double s : sq) var += s;
    var /= static_cast<double>(g);
    const double sd = std::sqrt(var);
    std::vector<double> out(g, 0.0);
    if (sd < eps_std) return out;
    for (std::size_t i = 0; i < g; ++i) out[i] = (rewards[i] - mean) / sd;
    return out;
}

// One loss row: a trajectory, the scalar advantage shared by its whole
// rollout, and bookkeeping ids. family = one MultiTrajectory (planner plus
// its workers); group = the G rollouts of one query.
struct BatchRow {
    const Trajectory* trajectory = nullptr;
    double advantage = 0.0;
    int group_id = 0;
    int family_id = 0;
};

struct AugmentedBatch {
    std::vector<BatchRow> rows;
    std::vector<long> family_token_totals;  // masked token count per family
    int group_count = 0;
    int family_count = 0;
};

// Broadcasts each rollout's advantage to its planner row and every worker row
// and concatenates everything into the augmented batch.
inline AugmentedBatch broadcast_advantages(std::span<const MultiTrajectory* const> rollouts,
                                           std::span<const double> advantages, int group_id = 0,
                                           AugmentedBatch batch = {}) {
    if (rollouts.size() != advantages.size())
        throw std::invalid_argument("advantage count must equal group size");
    for (std::size_t i = 0; i < rollouts.size(); ++i) {
        const MultiTrajectory* m = rollouts[i];
        if (!m) throw std::invalid_argument("null rollout in group");
        const int family = batch.family_count++;
        long total = masked_token_count(m->planner);
        batch.rows.push_back({&m->planner, advantages[i], group_id, family});
        for (const auto& w : m->workers) {
            batch.rows.push_back({&w, advantages[i], group_id, family});
            total += masked_token_count(w);
        }
        batch.family_token_totals.push_back(total);
    }
    batch.group_count = std::max(batch.group_count, group_id + 1);
    return batch;
}

// Single-agent batches reuse the same structure with one trajectory per family.
inline AugmentedBatch single_agent_batch(std::span<const Trajectory* const> rollouts,
                                         std::span<const double> advantages, int group_id = 0,
                                         AugmentedBatch batch = {}) {
    if (rollouts.size() != advantages.size())
        throw std::invalid_argument("advantage count must equal group size");
    for (std::size_t i = 0; i < rollouts.size(); ++i) {
        const int family = batch.family_count++;
        batch.rows.push_back({rollouts[i], advantages[i], group_id, family});
        batch.family_token_totals.push_back(masked_token_count(*rollouts[i]));
    }
    batch.group_count = std::max(batch.group_count, group_id + 1);
    return batch;
}

} // namespace matpo
