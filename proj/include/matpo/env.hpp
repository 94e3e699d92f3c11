#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "matpo/grammar.hpp"
#include "matpo/rng.hpp"
#include "matpo/vocab.hpp"

namespace matpo {

struct Document {
    int id = 0;
    std::string url;
    std::vector<TokenId> title;
    std::vector<TokenId> body;
    std::vector<int> links;
};

// Immutable after construction; the inverted index is rebuilt on load so it
// can never drift from the bodies.
class Corpus {
public:
    Corpus() = default;

    explicit Corpus(std::vector<Document> docs) : docs_(std::move(docs)) {
        std::sort(docs_.begin(), docs_.end(),
                  [](const Document& a, const Document& b) { return a.id < b.id; });
        std::set<int> ids;
        for (const auto& d : docs_)
            if (!ids.insert(d.id).second) throw std::invalid_argument("corpus: duplicate doc id");
        for (const auto& d : docs_)
            for (int link : d.links)
                if (!ids.count(link)) throw std::invalid_argument("corpus: dangling link target");
        for (std::size_t i = 0; i < docs_.size(); ++i) {
            std::set<TokenId> seen;
            for (TokenId t : docs_[i].title) seen.insert(t);
            for (TokenId t : docs_[i].body) seen.insert(t);
            for (TokenId t : seen) index_[t].push_back(static_cast<int>(i));
        }
    }

    const std::vector<Document>& documents() const { return docs_; }

    const Document* by_url(std::string_view url) const {
        for (const auto& d : docs_)
            if (d.url == url) return &d;
        return nullptr;
    }

    // Documents containing `term`, as positions into documents().
    std::span<const int> postings(TokenId term) const {
        static const std::vector<int> empty;
        auto it = index_.find(term);
        return it == index_.end() ? std::span<const int>(empty) : std::span<const int>(it->second);
    }

    static int occurrences(const Document& d, TokenId term) {
        int n = 0;
        for (TokenId t : d.title) n += (t == term);
        for (TokenId t : d.body) n += (t == term);
        return n;
    }

private:
    std::vector<Document> docs_;
    std::map<TokenId, std::vector<int>> index_;
};

struct ToolResponse {
    std::string text;
    bool ok = true;
    int tokens_cost = 0;
};

struct NoiseConfig {
    double level = 0.0;          // in [0, 1]
    double amplification = 4.0;  // tokens_cost inflates by (1 + amplification * level)
    double transient_fail_prob = 0.0;
};

struct TaskInstance {
    std::string query;
    std::string gold_answer;
    int hop_count = 1;
    std::uint64_t seed = 0;
};

// Substring-containment blocklist over urls.
struct Blocklist {
    std::vector<std::string> substrings;

    bool blocked(std::string_view url) const {
        for (const auto& s : substrings)
            if (!s.empty() && url.find(s) != std::string_view::npos) return true;
        return false;
    }

    static Blocklist defaults() { return Blocklist{{"hub/"}}; }

    static Blocklist load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("cannot open blocklist: " + path);
        Blocklist b;
        std::string line;
        while (std::getline(is, line)) {
            while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
            if (!line.empty() && line[0] != '#') b.substrings.push_back(line);
        }
        return b;
    }
};

namespace detail {

// Appends distractor tokens at seeded positions, never touching the trailing
// `keep_suffix` tokens, so the informative tail of a response survives any
// noise level. The original tokens stay a subsequence of the output.
inline std::vector<TokenId> interleave_noise(std::span<const TokenId> tokens,
                                             const std::vector<TokenId>& pool,
                                             int extra, int keep_suffix, Rng& rng) {
    std::vector<TokenId> out(tokens.begin(), tokens.end());
    if (pool.empty() || extra <= 0) return out;
    for (int i = 0; i < extra; ++i) {
        const std::size_t tail = std::min<std::size_t>(static_cast<std::size_t>(keep_suffix), out.size());
        const std::size_t limit = out.size() - tail;
        const std::size_t pos = static_cast<std::size_t>(rng.below(limit + 1));
        out.insert(out.begin() + static_cast<std::ptrdiff_t>(pos),
                   pool[static_cast<std::size_t>(rng.below(pool.size()))]);
    }
    return out;
}

} // namespace detail

// Inflates tokens_cost by (1 + amplification * level), keeping the last three
// tokens of the original response in place.
inline ToolResponse inject_noise(const Vocab& vocab, const Lexicon& lex, ToolResponse resp,
                                 const NoiseConfig& cfg, Rng& rng) {
    if (cfg.level < 0.0 || cfg.level > 1.0)
        throw std::invalid_argument("noise level must be in [0, 1]");
    if (cfg.level == 0.0) return resp;
    std::vector<TokenId> tokens = vocab.tokenize(resp.text);
    const long target = std::lround(static_cast<double>(tokens.size()) * (1.0 + cfg.amplification * cfg.level));
    const int extra = static_cast<int>(target) - static_cast<int>(tokens.size());
    tokens = detail::interleave_noise(tokens, lex.noise_pool, extra, 3, rng);
    resp.text = vocab.render(tokens);
    resp.tokens_cost = static_cast<int>(tokens.size());
    return resp;
}

struct SearchConfig {
    int k = 5;
};

// Deterministic tool backend. Failures come back as ok=false responses with
// explanatory text (the agent must observe them in-context); nothing throws.
class ToolEnv {
public:
    ToolEnv(const Vocab& vocab, const Lexicon& lex, Corpus corpus, Blocklist blocklist,
            NoiseConfig noise = {}, SearchConfig search = {})
        : vocab_(&vocab), lex_(&lex), corpus_(std::move(corpus)),
          blocklist_(std::move(blocklist)), noise_(noise), search_(search) {}

    const Vocab& vocab() const { return *vocab_; }
    const Lexicon& lexicon() const { return *lex_; }
    const Corpus& corpus() const { return corpus_; }
    const Blocklist& blocklist() const { return blocklist_; }
    const NoiseConfig& noise() const { return noise_; }

    ToolResponse execute(const ToolCall& call, Rng& rng) const {
        ToolResponse resp = dispatch(call, rng);
        return inject_noise(*vocab_, *lex_, std::move(resp), noise_, rng);
    }

private:
    ToolResponse from_tokens(std::vector<TokenId> tokens, bool ok) const {
        ToolResponse r;
        r.text = vocab_->render(tokens);
        r.tokens_cost = static_cast<int>(tokens.size());
        r.ok = ok;
        return r;
    }

    ToolResponse error_echo(TokenId what, std::string_view arg) const {
        std::vector<TokenId> t{lex_->w_error, what};
        if (!arg.empty()) {
            t.push_back(lex_->w_for);
            for (TokenId id : vocab_->tokenize(arg)) t.push_back(id);
        }
        return from_tokens(std::move(t), false);
    }

    static std::optional<std::string> string_arg(const ToolCall& call, const char* key) {
        auto it = call.arguments.find(key);
        if (it == call.arguments.end() || !it->second.is_string()) return std::nullopt;
        std::string v = it->second.get<std::string>();
        std::string_view sv = detail::trim(v);
        return std::string(sv);
    }

    ToolResponse dispatch(const ToolCall& call, Rng& rng) const {
        if (noise_.transient_fail_prob > 0.0 && rng.uniform01() < noise_.transient_fail_prob)
            return error_echo(lex_->w_failed, {});
        if (call.tool_name == lex::kToolGoogleSearch) return search(call);
        if (call.tool_name == lex::kToolScrape) return scrape(call);
        return error_echo(lex_->w_bad_tool_call, call.tool_name);
    }

    ToolResponse search(const ToolCall& call) const {
        auto q = string_arg(call, "q");
        if (!q || q->empty()) return error_echo(lex_->w_bad_tool_call, "q");
        const std::vector<TokenId> terms = vocab_->tokenize(*q);

        // Rank by total exact-term occurrences, ties broken by doc id.
        std::vector<std::pair<int, const Document*>> scored;
        for (const auto& d : corpus_.documents()) {
            if (blocklist_.blocked(d.url)) continue;
            int score = 0;
            for (TokenId t : terms) score += Corpus::occurrences(d, t);
            if (score > 0) scored.push_back({score, &d});
        }
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second->id < b.second->id;
        });
        if (scored.empty()) return error_echo(lex_->w_no_results, *q);
        if (static_cast<int>(scored.size()) > search_.k) scored.resize(static_cast<std::size_t>(search_.k));

        std::vector<TokenId> out;
        for (const auto& [score, doc] : scored) {
            out.push_back(lex_->w_result);
            for (TokenId t : doc->title) out.push_back(t);
            out.push_back(lex_->w_url);
            for (TokenId t : vocab_->tokenize(doc->url)) out.push_back(t);
        }
        // Tail snippet of the best hit, so the useful pointer sits at the end.
        const Document* best = scored.front().second;
        out.push_back(lex_->w_top);
        out.push_back(lex_->w_snippet);
        const std::size_t n = best->body.size();
        for (std::size_t i = n >= 3 ? n - 3 : 0; i < n; ++i) out.push_back(best->body[i]);
        return from_tokens(std::move(out), true);
    }

    ToolResponse scrape(const ToolCall& call) const {
        auto url = string_arg(call, "url");
        if (!url || url->empty()) return error_echo(lex_->w_bad_tool_call, "url");
        if (blocklist_.blocked(*url)) return error_echo(lex_->w_blocked, *url);
        const Document* doc = corpus_.by_url(*url);
        if (!doc) return error_echo(lex_->w_unknown_url, *url);
        return from_tokens(doc->body, true);
    }

    const Vocab* vocab_;
    const Lexicon* lex_;
    Corpus corpus_;
    Blocklist blocklist_;
    NoiseConfig noise_;
    SearchConfig search_;
};

// Spec-shaped free function over an ad-hoc environment.
inline ToolResponse execute_tool(const Vocab& vocab, const Lexicon& lex, const Corpus& corpus,
                                 const ToolCall& call, const Blocklist& blocklist,
                                 const NoiseConfig& noise, Rng& rng, SearchConfig search = {}) {
    ToolEnv env(vocab, lex, corpus, blocklist, noise, search);
    return env.execute(call, rng);
}

struct TaskGenOptions {
    int distractor_docs = 2;
    int body_filler = 6;        // filler tokens between head and tail of a body
    bool include_leak_doc = false;
};

namespace detail {

inline std::vector<TokenId> pick_distinct(const std::vector<TokenId>& pool, std::size_t n, Rng& rng) {
    if (n > pool.size()) throw std::invalid_argument("pool too small");
    std::vector<TokenId> shuffled = pool;
    for (std::size_t i = shuffled.size(); i > 1; --i)
        std::swap(shuffled[i - 1], shuffled[static_cast<std::size_t>(rng.below(i))]);
    shuffled.resize(n);
    return shuffled;
}

} // namespace detail

// Follows the intended tool sequence (search, read the tail snippet, hop) and
// returns the answer it surfaces. Used to validate every generated task and
// by tests as the behavior ceiling.
inline std::optional<std::string> scripted_solve(const ToolEnv& env, const TaskInstance& task) {
    const Vocab& vocab = env.vocab();
    const Lexicon& lex = env.lexicon();
    std::vector<TokenId> q = vocab.tokenize(task.query);
    if (q.empty()) return std::nullopt;
    TokenId term = q.back();
    Rng rng(mix_seed({task.seed, 0x501feULL}));
    for (int hop = 0; hop < task.hop_count; ++hop) {
        ToolCall call{lex::kServerSearch, lex::kToolGoogleSearch, {{"q", vocab.symbol(term)}}};
        ToolResponse resp = env.execute(call, rng);
        if (!resp.ok) return std::nullopt;
        std::vector<TokenId> tokens = vocab.tokenize(resp.text);
        if (tokens.size() < 2) return std::nullopt;
        const TokenId cue = tokens[tokens.size() - 2];
        const TokenId tail = tokens.back();
        if (cue == lex.w_is) return vocab.symbol(tail);
        if (cue == lex.w_key) { term = tail; continue; }
        return std::nullopt;
    }
    return std::nullopt;
}

// Builds a corpus whose query needs `hop_count` chained lookups: each chain
// document's body ends either with a pointer to the next link key or with the
// answer. The target of a hop contains its key twice (title + body head) so
// exact-match ranking prefers it over the document that referenced it.
inline std::pair<Corpus, TaskInstance> generate_task(const Vocab& vocab, const Lexicon& lex,
                                                     std::uint64_t seed, int hop_count,
                                                     const TaskGenOptions& opts = {}) {
    if (hop_count < 1) throw std::invalid_argument("hop_count must be >= 1");
    if (static_cast<std::size_t>(hop_count) > lex.urls.size())
        throw std::invalid_argument("hop_count exceeds available urls");
    Rng rng(mix_seed({seed, 0x7a5cULL}));

    const TokenId entity = lex.entities[static_cast<std::size_t>(rng.below(lex.entities.size()))];
    const std::vector<TokenId> keys =
        detail::pick_distinct(lex.keys, static_cast<std::size_t>(hop_count - 1), rng);
    const TokenId answer = lex.answers[static_cast<std::size_t>(rng.below(lex.answers.size()))];
    std::vector<TokenId> chain_urls =
        detail::pick_distinct(lex.urls, static_cast<std::size_t>(hop_count), rng);

    auto filler = [&](std::vector<TokenId>& body, int n) {
        for (int i = 0; i < n; ++i)
            body.push_back(lex.noise_pool[static_cast<std::size_t>(rng.below(lex.noise_pool.size()))]);
    };

    std::vector<Document> docs;
    for (int hop = 0; hop < hop_count; ++hop) {
        const TokenId head = hop == 0 ? entity : keys[static_cast<std::size_t>(hop - 1)];
        Document d;
        d.id = hop;
        d.url = vocab.symbol(chain_urls[static_cast<std::size_t>(hop)]);
        d.title = {head};
        d.body = {head};
        filler(d.body, opts.body_filler);
        if (hop + 1 < hop_count) {
            d.body.push_back(lex.w_next);
            d.body.push_back(lex.w_key);
            d.body.push_back(keys[static_cast<std::size_t>(hop)]);
            d.links = {hop + 1};
        } else {
            d.body.push_back(lex.w_answer);
            d.body.push_back(lex.w_is);
            d.body.push_back(answer);
        }
        docs.push_back(std::move(d));
    }

    // Distractors built from noise words only, so they can never outrank or
    // poison the chain.
    for (int i = 0; i < opts.distractor_docs; ++i) {
        const std::size_t url_index = static_cast<std::size_t>(hop_count) + static_cast<std::size_t>(i);
        if (url_index >= lex.urls.size()) break;
        Document d;
        d.id = hop_count + i;
        d.url = vocab.symbol(lex.urls[url_index]);
        d.title = {lex.noise_pool[static_cast<std::size_t>(rng.below(lex.noise_pool.size()))]};
        filler(d.body, opts.body_filler + 3);
        docs.push_back(std::move(d));
    }

    // Optional leakage document: outranks the chain on the seed entity and
    // reveals the answer directly. Shipped blocklists keep it invisible.
    if (opts.include_leak_doc) {
        Document d;
        d.id = hop_count + opts.distractor_docs + 1;
        d.url = vocab.symbol(lex.leak_url);
        d.title = {entity};
        d.body = {entity, entity, lex.w_answer, lex.w_is, answer};
        docs.push_back(std::move(d));
    }

    TaskInstance task;
    task.query = vocab.render(lex.query_words) + " " + vocab.symbol(entity);
    task.gold_answer = vocab.symbol(answer);
    task.hop_count = hop_count;
    task.seed = seed;

    Corpus corpus(std::move(docs));
    ToolEnv probe(vocab, lex, corpus, Blocklist::defaults(), NoiseConfig{}, SearchConfig{});
    auto solved = scripted_solve(probe, task);
    if (!solved || *solved != task.gold_answer)
        throw std::runtime_error("task generation produced an unsolvable instance");
    return {std::move(corpus), std::move(task)};
}

// --- serialization ----------------------------------------------------------
// Corpora and task manifests are line-delimited json records keyed by token
// symbols, so files stay readable and independent of token numbering.

inline void save_corpus(const Vocab& vocab, const Corpus& corpus, std::ostream& os) {
    for (const auto& d : corpus.documents()) {
        nlohmann::json rec;
        rec["id"] = d.id;
        rec["url"] = d.url;
        auto symbols = [&vocab](const std::vector<TokenId>& ids) {
            std::vector<std::string> out;
            for (TokenId t : ids) out.push_back(vocab.symbol(t));
            return out;
        };
        rec["title"] = symbols(d.title);
        rec["body"] = symbols(d.body);
        rec["links"] = d.links;
        os << rec.dump() << '\n';
    }
}

inline Corpus load_corpus(const Vocab& vocab, std::istream& is) {
    std::vector<Document> docs;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json rec = nlohmann::json::parse(line);
        Document d;
        d.id = rec.at("id").get<int>();
        d.url = rec.at("url").get<std::string>();
        for (const auto& s : rec.at("title")) d.title.push_back(vocab.require(s.get<std::string>()));
        for (const auto& s : rec.at("body")) d.body.push_back(vocab.require(s.get<std::string>()));
        for (const auto& l : rec.at("links")) d.links.push_back(l.get<int>());
        docs.push_back(std::move(d));
    }
    return Corpus(std::move(docs));
}

inline void save_tasks(std::span<const TaskInstance> tasks, std::ostream& os) {
    for (const auto& t : tasks) {
        nlohmann::json rec;
        rec["seed"] = t.seed;
        rec["hop_count"] = t.hop_count;
        rec["query"] = t.query;
        rec["gold_answer"] = t.gold_answer;
        os << rec.dump() << '\n';
    }
}

inline std::vector<TaskInstance> load_tasks(std::istream& is) {
    std::vector<TaskInstance> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json rec = nlohmann::json::parse(line);
        TaskInstance t;
        t.seed = rec.at("seed").get<std::uint64_t>();
        t.hop_count = rec.at("hop_count").get<int>();
        t.query = rec.at("query").get<std::string>();
        t.gold_answer = rec.at("gold_answer").get<std::string>();
        out.push_back(std::move(t));
    }
    return out;
}

} // namespace matpo
