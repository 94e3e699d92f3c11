#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include "matpo/policy.hpp"
#include "matpo/rewards.hpp"
#include "matpo/rollout.hpp"

namespace matpo {

struct LossReport {
    double loss = 0.0;                        // negated clipped objective (+ optional KL)
    std::vector<double> gradient;             // d(loss)/d(weights)
    std::vector<double> family_contributions; // per-family objective pieces
    double clip_fraction = 0.0;               // masked tokens on the clipped branch
    long ratio_terms = 0;
    bool finite = true;
};

struct KlPenalty {
    double coeff = 0.0;
    const PolicyParams* reference = nullptr;
};

namespace detail {

struct TokenVisit {
    std::span<const TokenId> context;
    TokenId token;
};

// Walks one trajectory and invokes fn(context, token) for every generated
// token, with the context being everything before it. Tool tokens appended
// after the last generated token are never visited, so they cannot anchor a
// ratio term.
template <typename Fn>
void for_each_masked_token(const Trajectory& traj, Fn&& fn) {
    std::vector<TokenId> seq;
    for (const auto& m : traj.messages) {
        if (m.origin != Origin::generated) {
            seq.insert(seq.end(), m.tokens.begin(), m.tokens.end());
            continue;
        }
        for (TokenId t : m.tokens) {
            fn(std::span<const TokenId>(seq), t);
            seq.push_back(t);
        }
    }
}

inline void check_params_pair(const PolicyParams& a, const PolicyParams& b) {
    if (!(a.feature_spec == b.feature_spec) || a.vocab_size != b.vocab_size ||
        a.vocab_fingerprint != b.vocab_fingerprint)
        throw std::invalid_argument("parameter sets disagree on feature spec or vocabulary");
}

} // namespace detail

// Per-token importance ratios pi_theta / pi_theta_old over the generated
// tokens of one trajectory, in trajectory order.
inline std::vector<double> token_ratios(const PolicyParams& params, const PolicyParams& params_old,
                                        const Trajectory& traj) {
    detail::check_params_pair(params, params_old);
    std::vector<double> out;
    std::vector<int> features;
    std::vector<double> logits_new, logits_old;
    detail::for_each_masked_token(traj, [&](std::span<const TokenId> ctx, TokenId t) {
        detail::logits_for(params, ctx, features, logits_new);
        detail::logits_for(params_old, ctx, features, logits_old);
        detail::softmax_inplace(logits_new);
        detail::softmax_inplace(logits_old);
        const double lp_new = std::log(logits_new[static_cast<std::size_t>(t)]);
        const double lp_old = std::log(logits_old[static_cast<std::size_t>(t)]);
        if (!std::isfinite(lp_new) || !std::isfinite(lp_old))
            throw std::runtime_error("non-finite log-probability in ratio");
        out.push_back(std::exp(lp_new - lp_old));
    });
    return out;
}

// Clipped surrogate over an augmented batch:
//
//   objective = mean_groups (1/G) sum_families (1/N_family)
//               sum_tokens min(r * A, clip(r, 1-eps, 1+eps) * A)
//
// N_family is the family's masked token count. The returned loss is the
// negated objective; its gradient flows through unclipped branches only (ties
// resolve to the unclipped branch) and treats params_old as a constant.
inline LossReport surrogate_loss(const AugmentedBatch& batch, const PolicyParams& params,
                                 const PolicyParams& params_old, double eps_clip,
                                 const KlPenalty& kl = {}) {
    detail::check_params_pair(params, params_old);
    if (batch.rows.empty()) throw std::invalid_argument("empty batch");
    if (!(eps_clip > 0.0 && eps_clip < 1.0)) throw std::invalid_argument("eps_clip must be in (0,1)");
    if (kl.coeff != 0.0 && kl.reference == nullptr)
        throw std::invalid_argument("KL penalty requires reference parameters");
    if (kl.reference) detail::check_params_pair(params, *kl.reference);

    const std::size_t family_count = batch.family_token_totals.size();
    std::vector<int> family_group(family_count, -1);
    std::vector<double> family_advantage(family_count, 0.0);
    std::vector<bool> family_seen(family_count, false);
    for (const auto& row : batch.rows) {
        if (row.family_id < 0 || static_cast<std::size_t>(row.family_id) >= family_count)
            throw std::invalid_argument("row references an unknown family");
        if (!family_seen[static_cast<std::size_t>(row.family_id)]) {
            family_seen[static_cast<std::size_t>(row.family_id)] = true;
            family_group[static_cast<std::size_t>(row.family_id)] = row.group_id;
            family_advantage[static_cast<std::size_t>(row.family_id)] = row.advantage;
        } else {
            if (family_group[static_cast<std::size_t>(row.family_id)] != row.group_id ||
                family_advantage[static_cast<std::size_t>(row.family_id)] != row.advantage)
                throw std::invalid_argument("rows of one family disagree on group or advantage");
        }
    }
    std::map<int, int> group_sizes;  // group id -> family count
    for (std::size_t f = 0; f < family_count; ++f) {
        if (!family_seen[f]) throw std::invalid_argument("family without rows");
        if (batch.family_token_totals[f] <= 0)
            throw std::invalid_argument("family with zero generated tokens");
        ++group_sizes[family_group[f]];
    }
    const double group_scale = 1.0 / static_cast<double>(group_sizes.size());

    LossReport report;
    report.gradient.assign(params.weights.size(), 0.0);
    report.family_contributions.assign(family_count, 0.0);
    long clipped = 0;

    std::vector<int> features;
    std::vector<double> probs_new, probs_old, probs_ref;
    const double lo = 1.0 - eps_clip;
    const double hi = 1.0 + eps_clip;

    for (const auto& row : batch.rows) {
        const double advantage = row.advantage;
        const long n_family = batch.family_token_totals[static_cast<std::size_t>(row.family_id)];
        const double scale = group_scale /
                             static_cast<double>(group_sizes.at(row.group_id)) /
                             static_cast<double>(n_family);
        detail::for_each_masked_token(*row.trajectory, [&](std::span<const TokenId> ctx, TokenId t) {
            detail::logits_for(params, ctx, features, probs_new);
            detail::softmax_inplace(probs_new);
            detail::logits_for(params_old, ctx, features, probs_old);
            detail::softmax_inplace(probs_old);
            const double p_new = probs_new[static_cast<std::size_t>(t)];
            const double p_old = probs_old[static_cast<std::size_t>(t)];
            const double lp_new = std::log(p_new);
            const double lp_old = std::log(p_old);
            if (!std::isfinite(lp_new) || !std::isfinite(lp_old))
                throw std::runtime_error("non-finite log-probability in loss");
            const double ratio = std::exp(lp_new - lp_old);
            const double clipped_ratio = std::min(std::max(ratio, lo), hi);
            const double unclipped_term = ratio * advantage;
            const double clipped_term = clipped_ratio * advantage;
            const bool use_unclipped = unclipped_term <= clipped_term;
            const double term = use_unclipped ? unclipped_term : clipped_term;

            report.family_contributions[static_cast<std::size_t>(row.family_id)] +=
                term / static_cast<double>(n_family);
            report.loss -= scale * term;
            ++report.ratio_terms;
            if (!use_unclipped) ++clipped;

            double coeff = 0.0;
            if (use_unclipped) coeff -= scale * advantage * ratio;  // d(loss)/d(lp_new)
            if (kl.coeff != 0.0) {
                detail::logits_for(*kl.reference, ctx, features, probs_ref);
                detail::softmax_inplace(probs_ref);
                const double lp_ref = std::log(probs_ref[static_cast<std::size_t>(t)]);
                const double delta = lp_ref - lp_new;
                report.loss += kl.coeff * scale * (std::exp(delta) - delta - 1.0);
                coeff += kl.coeff * scale * (1.0 - std::exp(delta));
            }
            if (coeff != 0.0) {
                for (int f : features) {
                    double* g = report.gradient.data() + static_cast<std::size_t>(f) * params.vocab_size;
                    for (TokenId v = 0; v < params.vocab_size; ++v)
                        g[v] -= coeff * probs_new[static_cast<std::size_t>(v)];
                    g[t] += coeff;
                }
            }
        });
    }

    report.clip_fraction = report.ratio_terms == 0
                               ? 0.0
                               : static_cast<double>(clipped) / static_cast<double>(report.ratio_terms);
    for (double g : report.gradient)
        if (!std::isfinite(g)) { report.finite = false; break; }
    if (!std::isfinite(report.loss)) report.finite = false;
    return report;
}

// Single-agent objective: the same computation over families of exactly one
// trajectory, so degenerate multi-agent batches match it bit for bit.
inline LossReport grpo_loss(const AugmentedBatch& batch, const PolicyParams& params,
                            const PolicyParams& params_old, double eps_clip,
                            const KlPenalty& kl = {}) {
    return surrogate_loss(batch, params, params_old, eps_clip, kl);
}

struct OptimizerConfig {
    double lr = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    long t = 0;

    void ensure_size(std::size_t n) {
        if (m.empty()) { m.assign(n, 0.0); v.assign(n, 0.0); }
        if (m.size() != n) throw std::invalid_argument("optimizer state size mismatch");
    }
};

// One first-order update on the surrogate loss. A non-finite gradient aborts
// the step: the report is returned, parameters and moments stay untouched.
inline LossReport train_step(PolicyParams& params, const PolicyParams& params_old,
                             const AugmentedBatch& batch, AdamState& state,
                             const OptimizerConfig& opt, double eps_clip,
                             const KlPenalty& kl = {}) {
    LossReport report = surrogate_loss(batch, params, params_old, eps_clip, kl);
    if (!report.finite) return report;
    state.ensure_size(params.weights.size());
    state.t += 1;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.weights.size(); ++i) {
        const double g = report.gradient[i];
        state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * g;
        state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * g * g;
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        params.weights[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
    return report;
}

// Refresh the rollout snapshot every `period` steps (period 1 = on-policy).
inline bool maybe_refresh_snapshot(long step_index, long period, const PolicyParams& params,
                                   PolicyParams& params_old) {
    if (period < 1) throw std::invalid_argument("snapshot period must be >= 1");
    if (step_index % period != 0) return false;
    const std::uint64_t next_tag = std::max(params.version_tag, params_old.version_tag) + 1;
    params_old = params;
    params_old.version_tag = next_tag;
    return true;
}

} // namespace matpo
