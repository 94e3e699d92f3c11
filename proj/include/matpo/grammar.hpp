#pragma once

#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace matpo {

// One parsed tool invocation. Argument values are restricted to JSON
// primitives (string / number / boolean), which is all the tool schemas use.
struct ToolCall {
    std::string server_name;
    std::string tool_name;
    std::map<std::string, nlohmann::json> arguments;

    bool operator==(const ToolCall&) const = default;
};

enum class ActionKind { tool_call, final_answer, summary_report, malformed, plain };

struct SummarySections {
    std::string conclusion;
    std::string supporting;
    std::string observations;
    std::string contribution;
};

// Classification of one generated action. Exactly one kind applies; malformed
// outcomes carry a machine-readable reason so the trainer can turn them into
// format-reward penalties instead of crashes.
struct ParseOutcome {
    ActionKind kind = ActionKind::plain;
    std::optional<ToolCall> call;
    std::string answer;
    std::optional<SummarySections> report;
    std::string reason;
};

namespace detail {

inline constexpr std::string_view kBlockOpen = "<use_mcp_tool>";
inline constexpr std::string_view kBlockClose = "</use_mcp_tool>";

inline bool is_ws(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && is_ws(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_ws(s.back())) s.remove_suffix(1);
    return s;
}

inline std::size_t count_occurrences(std::string_view text, std::string_view needle) {
    std::size_t n = 0;
    for (std::size_t pos = text.find(needle); pos != std::string_view::npos;
         pos = text.find(needle, pos + needle.size()))
        ++n;
    return n;
}

// Extracts the content of the first <tag>...</tag> pair inside `body`.
inline std::optional<std::string_view> tag_content(std::string_view body, std::string_view tag) {
    const std::string open = "<" + std::string(tag) + ">";
    const std::string close = "</" + std::string(tag) + ">";
    std::size_t a = body.find(open);
    if (a == std::string_view::npos) return std::nullopt;
    a += open.size();
    std::size_t b = body.find(close, a);
    if (b == std::string_view::npos) return std::nullopt;
    return body.substr(a, b - a);
}

inline ParseOutcome malformed(std::string reason) {
    ParseOutcome out;
    out.kind = ActionKind::malformed;
    out.reason = std::move(reason);
    return out;
}

// Last \boxed{...} span with balanced braces; nullopt when absent/unclosed.
inline std::optional<std::string> last_boxed_span(std::string_view text) {
    constexpr std::string_view marker = "\\boxed{";
    std::size_t best = std::string_view::npos;
    for (std::size_t pos = text.find(marker); pos != std::string_view::npos;
         pos = text.find(marker, pos + 1))
        best = pos;
    if (best == std::string_view::npos) return std::nullopt;
    std::size_t i = best + marker.size();
    int depth = 1;
    std::string content;
    for (; i < text.size(); ++i) {
        char c = text[i];
        if (c == '{') ++depth;
        if (c == '}') {
            --depth;
            if (depth == 0) return content;
        }
        content += c;
    }
    return std::nullopt;
}

inline std::optional<std::string_view> section_body(std::string_view text, std::string_view heading) {
    const std::string needle = "## " + std::string(heading);
    std::size_t a = text.find(needle);
    if (a == std::string_view::npos) return std::nullopt;
    a += needle.size();
    if (a < text.size() && text[a] == ':') ++a;
    std::size_t b = text.find("\n## ", a);
    if (b == std::string_view::npos) b = text.size();
    return text.substr(a, b - a);
}

} // namespace detail

inline bool has_tool_call_attempt(std::string_view text) noexcept {
    return text.find(detail::kBlockOpen) != std::string_view::npos;
}

// Classifies one action string. Total over arbitrary input: malformation is
// reported as data, never thrown. Precedence: a tool-call attempt dominates,
// then \boxed{} answers, then a structured report, otherwise plain text.
inline ParseOutcome parse_action(std::string_view text) noexcept {
    using namespace detail;
    try {
        if (has_tool_call_attempt(text)) {
            if (count_occurrences(text, kBlockOpen) > 1)
                return malformed("multiple_tool_calls");
            const std::size_t open = text.find(kBlockOpen);
            const std::size_t close = text.find(kBlockClose, open);
            if (close == std::string_view::npos) return malformed("unclosed_block");
            // The appendix format wants the call to be the last top-level
            // element; any non-whitespace suffix invalidates the action.
            if (!trim(text.substr(close + kBlockClose.size())).empty())
                return malformed("trailing_content");
            std::string_view body = text.substr(open + kBlockOpen.size(), close - open - kBlockOpen.size());

            auto server = tag_content(body, "server_name");
            if (!server) return malformed("missing_server_name");
            auto tool = tag_content(body, "tool_name");
            if (!tool) return malformed("missing_tool_name");
            auto args = tag_content(body, "arguments");
            if (!args) return malformed("missing_arguments");

            nlohmann::json parsed = nlohmann::json::parse(trim(*args), nullptr, false);
            if (parsed.is_discarded()) return malformed("json_invalid");
            if (!parsed.is_object()) return malformed("args_not_object");

            ToolCall call;
            call.server_name = std::string(trim(*server));
            call.tool_name = std::string(trim(*tool));
            if (call.server_name.empty()) return malformed("missing_server_name");
            if (call.tool_name.empty()) return malformed("missing_tool_name");
            for (auto& [key, value] : parsed.items()) {
                if (!(value.is_string() || value.is_number() || value.is_boolean()))
                    return malformed("args_not_primitive");
                call.arguments.emplace(key, value);
            }
            ParseOutcome out;
            out.kind = ActionKind::tool_call;
            out.call = std::move(call);
            return out;
        }

        if (auto boxed = last_boxed_span(text)) {
            ParseOutcome out;
            out.kind = ActionKind::final_answer;
            out.answer = std::string(trim(*boxed));
            return out;
        }

        if (auto conclusion = section_body(text, "Conclusion")) {
            ParseOutcome out;
            out.kind = ActionKind::summary_report;
            SummarySections s;
            s.conclusion = std::string(trim(*conclusion));
            if (auto v = section_body(text, "Supporting Information")) s.supporting = std::string(trim(*v));
            if (auto v = section_body(text, "Observations")) s.observations = std::string(trim(*v));
            if (auto v = section_body(text, "Contribution to Main Task")) s.contribution = std::string(trim(*v));
            out.report = std::move(s);
            return out;
        }

        return ParseOutcome{};
    } catch (...) {
        return detail::malformed("internal_parse_failure");
    }
}

// Subtask argument of a worker-delegation call, verbatim. Empty when the call
// is not a delegation or the required key is absent (a failed tool call).
inline std::optional<std::string> extract_subtask(const ToolCall& call) {
    if (call.tool_name != "search_and_browse") return std::nullopt;
    auto it = call.arguments.find("subtask");
    if (it == call.arguments.end() || !it->second.is_string()) return std::nullopt;
    return it->second.get<std::string>();
}

// Tool-call success rate over a list of actions: successfully parsed calls
// naming a registered tool, divided by actions containing an attempt. With no
// attempts at all the score is vacuously 1.
inline double format_score(std::span<const std::string> actions,
                           const std::set<std::string>& registered_tools) {
    std::size_t attempts = 0;
    std::size_t successes = 0;
    for (const auto& a : actions) {
        if (!has_tool_call_attempt(a)) continue;
        ++attempts;
        ParseOutcome out = parse_action(a);
        if (out.kind == ActionKind::tool_call && registered_tools.count(out.call->tool_name))
            ++successes;
    }
    if (attempts == 0) return 1.0;
    return static_cast<double>(successes) / static_cast<double>(attempts);
}

inline std::string render_tool_call(const ToolCall& call) {
    nlohmann::json args = nlohmann::json::object();
    for (const auto& [k, v] : call.arguments) args[k] = v;
    std::string out;
    out += "<use_mcp_tool>\n<server_name>";
    out += call.server_name;
    out += "</server_name>\n<tool_name>";
    out += call.tool_name;
    out += "</tool_name>\n<arguments>\n";
    out += args.dump();
    out += "\n</arguments>\n</use_mcp_tool>";
    return out;
}

namespace detail {

// Replaces every URL-shaped word with ([link]), per the report instructions.
inline std::string scrub_urls(std::string_view text) {
    std::string out;
    std::size_t i = 0;
    while (i < text.size()) {
        if (is_ws(text[i])) { out += text[i++]; continue; }
        std::size_t j = i;
        while (j < text.size() && !is_ws(text[j])) ++j;
        std::string_view word = text.substr(i, j - i);
        if (word.find("://") != std::string_view::npos)
            out += "([link])";
        else
            out += word;
        i = j;
    }
    return out;
}

} // namespace detail

// Renders the four-section final report skeleton in fixed order.
inline std::string render_summary_report(std::string_view conclusion,
                                         std::string_view supporting,
                                         std::string_view observations,
                                         std::string_view contribution) {
    if (detail::trim(conclusion).empty())
        throw std::invalid_argument("summary report: conclusion must be nonempty");
    std::string out;
    out += "# Final Response: subtask findings\n";
    out += "## Conclusion:\n";
    out += detail::scrub_urls(conclusion);
    out += "\n## Supporting Information:\n";
    out += detail::scrub_urls(supporting);
    out += "\n## Observations:\n";
    out += detail::scrub_urls(observations);
    out += "\n## Contribution to Main Task:\n";
    out += detail::scrub_urls(contribution);
    return out;
}

} // namespace matpo
