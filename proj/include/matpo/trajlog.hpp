#pragma once

#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "matpo/rewards.hpp"
#include "matpo/rollout.hpp"
#include "matpo/vocab.hpp"

namespace matpo {

// One line-delimited record per full rollout: messages with origins and
// masks, subtask links, reward fields and the broadcast advantage. This is
// the replay and audit format; rewards can be recomputed from it offline.

namespace trajlog {

inline const char* origin_name(Origin o) {
    switch (o) {
        case Origin::system: return "system";
        case Origin::query: return "query";
        case Origin::generated: return "generated";
        case Origin::tool: return "tool";
    }
    return "system";
}

inline Origin origin_from(const std::string& s) {
    if (s == "system") return Origin::system;
    if (s == "query") return Origin::query;
    if (s == "generated") return Origin::generated;
    if (s == "tool") return Origin::tool;
    throw std::runtime_error("unknown message origin: " + s);
}

inline nlohmann::json trajectory_json(const Vocab& vocab, const Trajectory& traj) {
    nlohmann::json out;
    out["role"] = traj.role == Role::planner ? "planner" : "worker";
    out["subtask"] = traj.subtask_query;
    out["truncated"] = traj.truncated;
    if (traj.terminal_answer) out["terminal"] = *traj.terminal_answer;
    nlohmann::json messages = nlohmann::json::array();
    for (const auto& m : traj.messages) {
        nlohmann::json msg;
        msg["origin"] = origin_name(m.origin);
        msg["turn"] = m.turn_index;
        nlohmann::json tokens = nlohmann::json::array();
        for (TokenId t : m.tokens) tokens.push_back(vocab.symbol(t));
        msg["tokens"] = std::move(tokens);
        messages.push_back(std::move(msg));
    }
    out["messages"] = std::move(messages);
    auto mask = token_mask(traj);
    out["mask"] = std::vector<int>(mask.begin(), mask.end());
    return out;
}

inline Trajectory trajectory_from_json(const Vocab& vocab, const nlohmann::json& rec) {
    Trajectory traj;
    traj.role = rec.at("role").get<std::string>() == "planner" ? Role::planner : Role::worker;
    traj.subtask_query = rec.at("subtask").get<std::string>();
    traj.truncated = rec.at("truncated").get<bool>();
    if (rec.contains("terminal")) traj.terminal_answer = rec.at("terminal").get<std::string>();
    for (const auto& msg : rec.at("messages")) {
        Message m;
        m.origin = origin_from(msg.at("origin").get<std::string>());
        m.turn_index = msg.at("turn").get<int>();
        for (const auto& s : msg.at("tokens")) m.tokens.push_back(vocab.require(s.get<std::string>()));
        traj.messages.push_back(std::move(m));
    }
    return traj;
}

struct RolloutRecord {
    std::string id;
    long step = 0;
    int query_index = 0;
    int member = 0;
    std::string mode;
    std::string query;
    std::string gold;
    std::optional<std::string> final_answer;
    RewardBreakdown reward;
    double advantage = 0.0;
    std::string group;
    std::vector<Trajectory> trajectories;  // planner first (or the single agent)
};

inline nlohmann::json record_to_json(const Vocab& vocab, const RolloutRecord& rec) {
    nlohmann::json out;
    out["id"] = rec.id;
    out["step"] = rec.step;
    out["query_index"] = rec.query_index;
    out["member"] = rec.member;
    out["mode"] = rec.mode;
    out["query"] = rec.query;
    out["gold"] = rec.gold;
    if (rec.final_answer) out["final_answer"] = *rec.final_answer;
    out["acc"] = rec.reward.acc;
    out["fmt_p"] = rec.reward.fmt_p;
    out["fmt_w"] = rec.reward.fmt_w_values;
    out["fmt"] = rec.reward.fmt;
    out["reward"] = rec.reward.reward;
    out["advantage"] = rec.advantage;
    out["group"] = rec.group;
    nlohmann::json trajs = nlohmann::json::array();
    for (const auto& t : rec.trajectories) trajs.push_back(trajectory_json(vocab, t));
    out["trajectories"] = std::move(trajs);
    return out;
}

inline RolloutRecord record_from_json(const Vocab& vocab, const nlohmann::json& j) {
    RolloutRecord rec;
    rec.id = j.at("id").get<std::string>();
    rec.step = j.at("step").get<long>();
    rec.query_index = j.at("query_index").get<int>();
    rec.member = j.at("member").get<int>();
    rec.mode = j.at("mode").get<std::string>();
    rec.query = j.at("query").get<std::string>();
    rec.gold = j.at("gold").get<std::string>();
    if (j.contains("final_answer")) rec.final_answer = j.at("final_answer").get<std::string>();
    rec.reward.acc = j.at("acc").get<int>();
    rec.reward.fmt_p = j.at("fmt_p").get<double>();
    rec.reward.fmt_w_values = j.at("fmt_w").get<std::vector<double>>();
    rec.reward.fmt = j.at("fmt").get<double>();
    rec.reward.reward = j.at("reward").get<double>();
    rec.advantage = j.at("advantage").get<double>();
    rec.group = j.at("group").get<std::string>();
    for (const auto& t : j.at("trajectories")) rec.trajectories.push_back(trajectory_from_json(vocab, t));
    return rec;
}

// Recomputes the reward fields from the logged messages alone.
inline RewardBreakdown recompute_reward(const Vocab& vocab, const RolloutRecord& rec,
                                        const Judge& judge) {
    if (rec.trajectories.empty()) throw std::runtime_error("record without trajectories");
    std::vector<double> fmt_w;
    for (std::size_t i = 1; i < rec.trajectories.size(); ++i)
        fmt_w.push_back(fmt_for_trajectory(vocab, rec.trajectories[i]));
    const double fmt_lead = fmt_for_trajectory(vocab, rec.trajectories.front());
    return composite_reward(judge(rec.final_answer, rec.gold), fmt_lead, fmt_w);
}

inline std::string transcript(const Vocab& vocab, const RolloutRecord& rec) {
    std::ostringstream os;
    os << "rollout " << rec.id << " (" << rec.mode << ")\n";
    os << "query: " << rec.query << "\n";
    os << "gold:  " << rec.gold << "\n";
    os << "final: " << (rec.final_answer ? *rec.final_answer : "<none>") << "\n";
    os << "reward " << rec.reward.reward << "  acc " << rec.reward.acc << "  fmt_p "
       << rec.reward.fmt_p << "  fmt " << rec.reward.fmt << "  advantage " << rec.advantage
       << "\n";
    for (const auto& traj : rec.trajectories) {
        os << "-- " << (traj.role == Role::planner ? "planner" : "worker");
        if (!traj.subtask_query.empty()) os << " [subtask:" << traj.subtask_query << "]";
        if (traj.truncated) os << " (truncated)";
        os << "\n";
        for (const auto& m : traj.messages) {
            os << "   " << origin_name(m.origin) << "/" << m.turn_index << ": "
               << vocab.render(m.tokens) << "\n";
        }
        if (traj.terminal_answer) os << "   terminal: " << *traj.terminal_answer << "\n";
    }
    return os.str();
}

inline std::optional<RolloutRecord> find_record(const Vocab& vocab, std::istream& is,
                                                const std::string& id) {
    std::string line;
    long line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw std::runtime_error("malformed log record at line " + std::to_string(line_no));
        if (j.value("id", "") == id) return record_from_json(vocab, j);
    }
    return std::nullopt;
}

} // namespace trajlog
} // namespace matpo
