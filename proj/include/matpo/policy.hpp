#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "matpo/rng.hpp"
#include "matpo/vocab.hpp"

namespace matpo {

enum class Role { planner, worker };

// Context featurization: one bias feature plus one positional feature per
// (offset, token) pair over the last `window` context tokens. When the exact
// pair count fits in feature_count the layout is injective; otherwise pairs
// are folded into buckets with a seeded hash (collisions allowed).
struct FeatureSpec {
    int window = 4;
    int feature_count = 256;
    std::uint64_t hash_salt = 0x5eedf00dULL;

    bool operator==(const FeatureSpec&) const = default;

    int active_limit() const { return window + 1; }

    bool injective_for(TokenId vocab_size) const {
        return 1 + window * static_cast<int>(vocab_size) <= feature_count;
    }

    int feature_index(int offset, TokenId token, TokenId vocab_size) const {
        if (injective_for(vocab_size))
            return 1 + (offset - 1) * vocab_size + token;
        std::uint64_t s = mix_seed({hash_salt, static_cast<std::uint64_t>(offset),
                                    static_cast<std::uint64_t>(token)});
        return 1 + static_cast<int>(s % static_cast<std::uint64_t>(feature_count - 1));
    }

    // Active feature indices for a context; index 0 (bias) is always present.
    void active_features(std::span<const TokenId> ctx, TokenId vocab_size,
                         std::vector<int>& out) const {
        out.clear();
        out.push_back(0);
        const int n = static_cast<int>(ctx.size());
        for (int k = 1; k <= window && k <= n; ++k)
            out.push_back(feature_index(k, ctx[static_cast<std::size_t>(n - k)], vocab_size));
    }
};

struct Context {
    std::vector<TokenId> tokens;
    Role role = Role::worker;
};

// Flat weight matrix, row per feature, column per vocabulary token.
struct PolicyParams {
    FeatureSpec feature_spec;
    std::uint64_t vocab_fingerprint = 0;
    TokenId vocab_size = 0;
    std::uint64_t version_tag = 0;
    std::vector<double> weights;

    static PolicyParams zeros(const FeatureSpec& spec, const Vocab& vocab) {
        PolicyParams p;
        p.feature_spec = spec;
        p.vocab_fingerprint = vocab.fingerprint();
        p.vocab_size = vocab.size();
        p.weights.assign(static_cast<std::size_t>(spec.feature_count) * vocab.size(), 0.0);
        return p;
    }

    double& at(int feature, TokenId token) {
        return weights[static_cast<std::size_t>(feature) * vocab_size + token];
    }
    double at(int feature, TokenId token) const {
        return weights[static_cast<std::size_t>(feature) * vocab_size + token];
    }

    void check_finite() const {
        for (double w : weights)
            if (!std::isfinite(w)) throw std::runtime_error("policy weights contain non-finite values");
    }
};

inline PolicyParams snapshot(const PolicyParams& params) {
    PolicyParams copy = params;
    copy.version_tag = params.version_tag + 1;
    return copy;
}

namespace detail {

// logits <- sum of active weight rows.
inline void logits_for(const PolicyParams& p, std::span<const TokenId> ctx,
                       std::vector<int>& features, std::vector<double>& logits) {
    p.feature_spec.active_features(ctx, p.vocab_size, features);
    logits.assign(static_cast<std::size_t>(p.vocab_size), 0.0);
    for (int f : features) {
        const double* row = p.weights.data() + static_cast<std::size_t>(f) * p.vocab_size;
        for (TokenId v = 0; v < p.vocab_size; ++v) logits[static_cast<std::size_t>(v)] += row[v];
    }
}

// In-place softmax with the usual max-shift; returns log of the normalizer.
inline double softmax_inplace(std::vector<double>& logits) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : logits) mx = std::max(mx, x);
    double z = 0.0;
    for (double& x : logits) { x = std::exp(x - mx); z += x; }
    for (double& x : logits) x /= z;
    return std::log(z) + mx;
}

inline void validate_action(const PolicyParams& p, const Vocab& vocab,
                            std::span<const TokenId> action, bool require_sentinel) {
    if (action.empty()) throw std::invalid_argument("action must be nonempty");
    for (std::size_t i = 0; i < action.size(); ++i) {
        if (action[i] < 0 || action[i] >= p.vocab_size)
            throw std::invalid_argument("action contains an unknown token");
        if (action[i] == vocab.eoa() && i + 1 != action.size())
            throw std::invalid_argument("end-of-action sentinel before the end");
    }
    if (require_sentinel && action.back() != vocab.eoa())
        throw std::invalid_argument("action must end with the end-of-action sentinel");
}

} // namespace detail

struct TokenLogProbs {
    std::vector<double> per_token;
    double total = 0.0;
};

// Log-probability of `action` under the autoregressive factorization, one
// entry per action token. Truncated actions (no sentinel, cut off at the
// generation cap) are scored when require_sentinel is false; they are valid
// training data.
inline TokenLogProbs logprob_action(const PolicyParams& params, const Vocab& vocab,
                                    const Context& ctx, std::span<const TokenId> action,
                                    bool require_sentinel = true) {
    detail::validate_action(params, vocab, action, require_sentinel);
    TokenLogProbs out;
    std::vector<TokenId> seq = ctx.tokens;
    std::vector<int> features;
    std::vector<double> logits;
    for (TokenId a : action) {
        detail::logits_for(params, seq, features, logits);
        const double logz = detail::softmax_inplace(logits);
        (void)logz;
        const double lp = std::log(logits[static_cast<std::size_t>(a)]);
        if (!std::isfinite(lp)) throw std::runtime_error("non-finite log-probability");
        out.per_token.push_back(lp);
        out.total += lp;
        seq.push_back(a);
    }
    return out;
}

// Samples autoregressively until the sentinel or max_tokens, whichever first.
inline std::vector<TokenId> sample_action(const PolicyParams& params, const Vocab& vocab,
                                          const Context& ctx, int max_tokens, Rng& rng) {
    if (max_tokens < 1) throw std::invalid_argument("max_tokens must be >= 1");
    std::vector<TokenId> seq = ctx.tokens;
    std::vector<TokenId> action;
    std::vector<int> features;
    std::vector<double> probs;
    for (int i = 0; i < max_tokens; ++i) {
        detail::logits_for(params, seq, features, probs);
        detail::softmax_inplace(probs);
        const double u = rng.uniform01();
        double acc = 0.0;
        TokenId pick = params.vocab_size - 1;
        for (TokenId v = 0; v < params.vocab_size; ++v) {
            acc += probs[static_cast<std::size_t>(v)];
            if (u < acc) { pick = v; break; }
        }
        action.push_back(pick);
        seq.push_back(pick);
        if (pick == vocab.eoa()) break;
    }
    return action;
}

// Argmax decoding with lowest-index tie break; same termination rule.
inline std::vector<TokenId> greedy_action(const PolicyParams& params, const Vocab& vocab,
                                          const Context& ctx, int max_tokens) {
    if (max_tokens < 1) throw std::invalid_argument("max_tokens must be >= 1");
    std::vector<TokenId> seq = ctx.tokens;
    std::vector<TokenId> action;
    std::vector<int> features;
    std::vector<double> logits;
    for (int i = 0; i < max_tokens; ++i) {
        detail::logits_for(params, seq, features, logits);
        TokenId pick = 0;
        for (TokenId v = 1; v < params.vocab_size; ++v)
            if (logits[static_cast<std::size_t>(v)] > logits[static_cast<std::size_t>(pick)]) pick = v;
        action.push_back(pick);
        seq.push_back(pick);
        if (pick == vocab.eoa()) break;
    }
    return action;
}

// Accumulates coeff * d(log pi(action|ctx))/d(weights) into grad (length
// feature_count * vocab_size). The softmax score function touches only the
// active feature rows: row_f += coeff * (onehot(a) - p).
inline void accumulate_grad_logprob(const PolicyParams& params, const Vocab& vocab,
                                    const Context& ctx, std::span<const TokenId> action,
                                    double coeff, std::span<double> grad,
                                    bool require_sentinel = true) {
    detail::validate_action(params, vocab, action, require_sentinel);
    if (grad.size() != params.weights.size())
        throw std::invalid_argument("gradient buffer size mismatch");
    std::vector<TokenId> seq = ctx.tokens;
    std::vector<int> features;
    std::vector<double> probs;
    for (TokenId a : action) {
        detail::logits_for(params, seq, features, probs);
        detail::softmax_inplace(probs);
        for (int f : features) {
            double* row = grad.data() + static_cast<std::size_t>(f) * params.vocab_size;
            for (TokenId v = 0; v < params.vocab_size; ++v)
                row[v] -= coeff * probs[static_cast<std::size_t>(v)];
            row[a] += coeff;
        }
        seq.push_back(a);
    }
}

inline std::vector<double> grad_logprob(const PolicyParams& params, const Vocab& vocab,
                                        const Context& ctx, std::span<const TokenId> action,
                                        bool require_sentinel = true) {
    std::vector<double> grad(params.weights.size(), 0.0);
    accumulate_grad_logprob(params, vocab, ctx, action, 1.0, grad, require_sentinel);
    return grad;
}

// --- checkpoint io ----------------------------------------------------------
// Text records with hexfloat weights: round-trips bit-exactly and stays
// greppable. Layout: header, feature spec, vocab fingerprint, weights.

inline void save_params(const PolicyParams& p, std::ostream& os) {
    os << "matpo-policy v1\n";
    os << "feature_spec " << p.feature_spec.window << ' ' << p.feature_spec.feature_count
       << ' ' << p.feature_spec.hash_salt << '\n';
    os << "vocab " << p.vocab_fingerprint << ' ' << p.vocab_size << '\n';
    os << "version " << p.version_tag << '\n';
    os << "weights " << p.weights.size() << '\n';
    char buf[64];
    for (double w : p.weights) {
        std::snprintf(buf, sizeof(buf), "%a", w);
        os << buf << '\n';
    }
}

inline PolicyParams load_params(std::istream& is) {
    std::string line;
    auto next_line = [&]() -> std::string& {
        if (!std::getline(is, line)) throw std::runtime_error("policy checkpoint: truncated");
        return line;
    };
    if (next_line() != "matpo-policy v1") throw std::runtime_error("policy checkpoint: bad header");
    PolicyParams p;
    {
        std::istringstream ss(next_line());
        std::string tag;
        ss >> tag >> p.feature_spec.window >> p.feature_spec.feature_count >> p.feature_spec.hash_salt;
        if (tag != "feature_spec" || !ss) throw std::runtime_error("policy checkpoint: bad feature_spec");
    }
    {
        std::istringstream ss(next_line());
        std::string tag;
        ss >> tag >> p.vocab_fingerprint >> p.vocab_size;
        if (tag != "vocab" || !ss) throw std::runtime_error("policy checkpoint: bad vocab line");
    }
    {
        std::istringstream ss(next_line());
        std::string tag;
        ss >> tag >> p.version_tag;
        if (tag != "version" || !ss) throw std::runtime_error("policy checkpoint: bad version line");
    }
    std::size_t count = 0;
    {
        std::istringstream ss(next_line());
        std::string tag;
        ss >> tag >> count;
        if (tag != "weights" || !ss) throw std::runtime_error("policy checkpoint: bad weights line");
    }
    p.weights.resize(count);
    for (std::size_t i = 0; i < count; ++i)
        p.weights[i] = std::strtod(next_line().c_str(), nullptr);
    return p;
}

inline void check_compatible(const PolicyParams& p, const Vocab& vocab) {
    if (p.vocab_fingerprint != vocab.fingerprint() || p.vocab_size != vocab.size())
        throw std::runtime_error("policy checkpoint does not match the active vocabulary");
}

} // namespace matpo
