#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace matpo {

using TokenId = int;

// One alphabet entry. `symbol` is the unique name used by the tokenizer and
// in serialized files; `text` is what the token contributes to rendered
// action/message strings. Most tokens are plain words where text == symbol;
// a few merged tokens carry whole grammar fragments (tool-call prefixes,
// \boxed{, report skeletons), the way a subword tokenizer merges boilerplate.
struct TokenInfo {
    std::string symbol;
    std::string text;
};

class Vocab {
public:
    static constexpr TokenId kNone = -1;

    Vocab(std::vector<TokenInfo> tokens, std::string_view eoa_symbol, std::string_view unk_symbol)
        : tokens_(std::move(tokens)) {
        for (TokenId id = 0; id < size(); ++id) {
            const auto& sym = tokens_[static_cast<std::size_t>(id)].symbol;
            if (!by_symbol_.emplace(sym, id).second)
                throw std::invalid_argument("vocab: duplicate symbol '" + sym + "'");
        }
        eoa_ = require(eoa_symbol);
        unk_ = require(unk_symbol);
        if (size() < 8) throw std::invalid_argument("vocab: need at least 8 tokens");
    }

    TokenId size() const { return static_cast<TokenId>(tokens_.size()); }
    TokenId eoa() const { return eoa_; }
    TokenId unk() const { return unk_; }

    const std::string& symbol(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)).symbol; }
    const std::string& text(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)).text; }

    TokenId id_of(std::string_view symbol) const {
        auto it = by_symbol_.find(std::string(symbol));
        return it == by_symbol_.end() ? kNone : it->second;
    }

    TokenId require(std::string_view symbol) const {
        TokenId id = id_of(symbol);
        if (id == kNone) throw std::invalid_argument("vocab: unknown symbol '" + std::string(symbol) + "'");
        return id;
    }

    bool contains(TokenId id) const { return id >= 0 && id < size(); }

    // Whitespace-split tokenizer; unmatched words map to <unk>. Merged tokens
    // (whose text differs from their symbol) are never produced from text,
    // matching how tool responses and queries are built from plain words.
    std::vector<TokenId> tokenize(std::string_view text) const {
        std::vector<TokenId> out;
        std::size_t i = 0;
        while (i < text.size()) {
            while (i < text.size() && is_space(text[i])) ++i;
            std::size_t j = i;
            while (j < text.size() && !is_space(text[j])) ++j;
            if (j > i) {
                TokenId id = id_of(text.substr(i, j - i));
                out.push_back(id == kNone ? unk_ : id);
            }
            i = j;
        }
        return out;
    }

    // Joins token texts with single spaces; tokens with empty text (the
    // end-of-action sentinel) contribute nothing.
    std::string render(std::span<const TokenId> ids) const {
        std::string out;
        for (TokenId id : ids) {
            const std::string& t = text(id);
            if (t.empty()) continue;
            if (!out.empty()) out += ' ';
            out += t;
        }
        return out;
    }

    // FNV-1a over symbols and texts; stored in checkpoints so a parameter
    // file cannot be loaded against a different alphabet.
    std::uint64_t fingerprint() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto feed = [&h](std::string_view s) {
            for (unsigned char c : s) { h ^= c; h *= 0x100000001b3ULL; }
            h ^= 0xff; h *= 0x100000001b3ULL;
        };
        for (const auto& t : tokens_) { feed(t.symbol); feed(t.text); }
        return h;
    }

private:
    static bool is_space(char c) {
        return c == ' ' || c == '\t' || c == '\n' || c == '\r';
    }

    std::vector<TokenInfo> tokens_;
    std::unordered_map<std::string, TokenId> by_symbol_;
    TokenId eoa_ = kNone;
    TokenId unk_ = kNone;
};

namespace lex {
// Symbols of the workshop alphabet. Kept as named constants so engine,
// environment and tests never embed raw strings twice.
inline constexpr const char* kUnk = "<unk>";
inline constexpr const char* kEoa = "<eoa>";
inline constexpr const char* kSysPlanner = "<sys:planner>";
inline constexpr const char* kSysWorker = "<sys:worker>";
inline constexpr const char* kRecap = "<recap>";
inline constexpr const char* kQuery = "<q>";
inline constexpr const char* kCuePlanner = "<plan>";
inline constexpr const char* kCueWorker = "<work>";
inline constexpr const char* kToolOpen = "<tool>";
inline constexpr const char* kToolClose = "</tool>";
inline constexpr const char* kSummarize = "<sum>";

inline constexpr const char* kCallSearch = "[search]";
inline constexpr const char* kCallScrape = "[scrape]";
inline constexpr const char* kCallDelegate = "[delegate]";
inline constexpr const char* kCallEnd = "[end_call]";
inline constexpr const char* kBoxOpen = "[box]";
inline constexpr const char* kBoxClose = "[end_box]";
inline constexpr const char* kReportOpen = "[report]";
inline constexpr const char* kReportClose = "[end_report]";

inline constexpr const char* kServerSearch = "search_and_scrape_webpage";
inline constexpr const char* kServerBrowse = "browsing_agent";
inline constexpr const char* kToolGoogleSearch = "google_search";
inline constexpr const char* kToolScrape = "scrape";
inline constexpr const char* kToolDelegate = "search_and_browse";
} // namespace lex

// The default alphabet: framing tokens, merged grammar tokens, cue words,
// content pools (entities / link keys / answers / urls) and noise filler.
inline Vocab make_default_vocab() {
    using namespace lex;
    std::vector<TokenInfo> t;
    auto word = [&t](const char* s) { t.push_back({s, s}); };
    auto merged = [&t](const char* sym, std::string text) { t.push_back({sym, std::move(text)}); };

    word(kUnk);
    merged(kEoa, "");
    word(kSysPlanner);
    word(kSysWorker);
    word(kRecap);
    word(kQuery);
    word(kCuePlanner);
    word(kCueWorker);
    word(kToolOpen);
    word(kToolClose);
    word(kSummarize);

    merged(kCallSearch,
           "<use_mcp_tool>\n<server_name>search_and_scrape_webpage</server_name>\n"
           "<tool_name>google_search</tool_name>\n<arguments>\n{\"q\": \"");
    merged(kCallScrape,
           "<use_mcp_tool>\n<server_name>search_and_scrape_webpage</server_name>\n"
           "<tool_name>scrape</tool_name>\n<arguments>\n{\"url\": \"");
    merged(kCallDelegate,
           "<use_mcp_tool>\n<server_name>browsing_agent</server_name>\n"
           "<tool_name>search_and_browse</tool_name>\n<arguments>\n{\"subtask\": \"");
    merged(kCallEnd, "\"}\n</arguments>\n</use_mcp_tool>");
    merged(kBoxOpen, "\\boxed{");
    merged(kBoxClose, "}");
    merged(kReportOpen, "# Final Response: subtask findings\n## Conclusion:\n");
    merged(kReportClose,
           "\n## Supporting Information:\n- collected from earlier tool results\n"
           "## Observations:\n- produced at the turn limit\n"
           "## Contribution to Main Task:\n- supplies the requested fact");

    for (const char* w : {"result", "url", "top", "snippet", "next", "key", "answer", "is",
                          "error", "no_results", "unknown_url", "blocked", "bad_tool_call",
                          "failed", "for", "find", "secret", "of"})
        word(w);
    for (const char* w : {"mist", "static", "echo", "drift"}) word(w);
    for (const char* w : {"aurora", "basalt", "cobalt", "dynamo", "ember", "fjord"}) word(w);
    for (const char* w : {"krypton", "lattice", "marble", "nebula", "onyx", "prism"}) word(w);
    for (const char* w : {"amber", "brass", "cedar", "delta", "flint", "grove"}) word(w);
    for (const char* w : {"web://d0", "web://d1", "web://d2", "web://d3", "web://hub/answers"})
        word(w);

    return Vocab(std::move(t), kEoa, kUnk);
}

// Resolved id groups of the default alphabet, used by the task generator,
// the noise injector and the priming of initial policy weights.
struct Lexicon {
    TokenId unk, eoa;
    TokenId sys_planner, sys_worker, recap, query, cue_planner, cue_worker;
    TokenId tool_open, tool_close, summarize;
    TokenId call_search, call_scrape, call_delegate, call_end;
    TokenId box_open, box_close, report_open, report_close;
    TokenId w_result, w_url, w_top, w_snippet, w_next, w_key, w_answer, w_is;
    TokenId w_error, w_no_results, w_unknown_url, w_blocked, w_bad_tool_call, w_failed, w_for;
    std::vector<TokenId> query_words;
    std::vector<TokenId> noise_pool;
    std::vector<TokenId> entities;
    std::vector<TokenId> keys;
    std::vector<TokenId> answers;
    std::vector<TokenId> urls;         // regular document urls
    TokenId leak_url;

    explicit Lexicon(const Vocab& v) {
        using namespace lex;
        unk = v.unk(); eoa = v.eoa();
        sys_planner = v.require(kSysPlanner); sys_worker = v.require(kSysWorker);
        recap = v.require(kRecap); query = v.require(kQuery);
        cue_planner = v.require(kCuePlanner); cue_worker = v.require(kCueWorker);
        tool_open = v.require(kToolOpen); tool_close = v.require(kToolClose);
        summarize = v.require(kSummarize);
        call_search = v.require(kCallSearch); call_scrape = v.require(kCallScrape);
        call_delegate = v.require(kCallDelegate); call_end = v.require(kCallEnd);
        box_open = v.require(kBoxOpen); box_close = v.require(kBoxClose);
        report_open = v.require(kReportOpen); report_close = v.require(kReportClose);
        w_result = v.require("result"); w_url = v.require("url"); w_top = v.require("top");
        w_snippet = v.require("snippet"); w_next = v.require("next"); w_key = v.require("key");
        w_answer = v.require("answer"); w_is = v.require("is");
        w_error = v.require("error"); w_no_results = v.require("no_results");
        w_unknown_url = v.require("unknown_url"); w_blocked = v.require("blocked");
        w_bad_tool_call = v.require("bad_tool_call"); w_failed = v.require("failed");
        w_for = v.require("for");
        for (const char* w : {"find", "secret", "of"}) query_words.push_back(v.require(w));
        for (const char* w : {"mist", "static", "echo", "drift"}) noise_pool.push_back(v.require(w));
        for (const char* w : {"aurora", "basalt", "cobalt", "dynamo", "ember", "fjord"})
            entities.push_back(v.require(w));
        for (const char* w : {"krypton", "lattice", "marble", "nebula", "onyx", "prism"})
            keys.push_back(v.require(w));
        for (const char* w : {"amber", "brass", "cedar", "delta", "flint", "grove"})
            answers.push_back(v.require(w));
        for (const char* w : {"web://d0", "web://d1", "web://d2", "web://d3"})
            urls.push_back(v.require(w));
        leak_url = v.require("web://hub/answers");
    }

    // Tokens eligible for the copy prior of primed initializations: things a
    // rollout may need to quote from its context (never cue or framing words).
    std::vector<TokenId> content_pool() const {
        std::vector<TokenId> out;
        for (const auto* g : {&entities, &keys, &answers, &urls})
            out.insert(out.end(), g->begin(), g->end());
        return out;
    }
};

} // namespace matpo
