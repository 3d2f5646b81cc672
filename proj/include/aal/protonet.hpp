#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "aal/backbone.hpp"
#include "aal/episode.hpp"
#include "aal/error.hpp"

namespace aal {

enum class Metric { squared_euclidean, cosine };

/// One mean embedding per episode-local class.
struct PrototypeSet {
    int n_way = 0;
    int dim = 0;
    Metric metric = Metric::squared_euclidean;
    std::vector<double> prototypes;  // n_way x dim

    std::span<const double> prototype(int c) const {
        return {prototypes.data() + static_cast<std::ptrdiff_t>(c) * dim, static_cast<std::size_t>(dim)};
    }
};

/// Class means of `embeddings` (rows of length dim). Labels must be balanced.
inline PrototypeSet compute_prototypes(std::span<const double> embeddings, int dim, std::span<const int> labels,
                                       int n_way, Metric metric = Metric::squared_euclidean) {
    require(dim > 0 && n_way > 0, "compute_prototypes: dim and n_way must be positive");
    require(embeddings.size() == labels.size() * static_cast<std::size_t>(dim),
            "compute_prototypes: embeddings and labels differ in length");
    require(!labels.empty() && labels.size() % static_cast<std::size_t>(n_way) == 0,
            "compute_prototypes: support size is not a multiple of n_way");
    const int k = static_cast<int>(labels.size()) / n_way;
    if (!is_balanced(std::vector<int>(labels.begin(), labels.end()), n_way, k)) {
        throw ValidationError("compute_prototypes: support labels are not balanced");
    }
    PrototypeSet ps{n_way, dim, metric, std::vector<double>(static_cast<std::size_t>(n_way) * dim, 0.0)};
    for (std::size_t i = 0; i < labels.size(); ++i) {
        double* p = ps.prototypes.data() + static_cast<std::ptrdiff_t>(labels[i]) * dim;
        const double* e = embeddings.data() + static_cast<std::ptrdiff_t>(i) * dim;
        for (int d = 0; d < dim; ++d) {
            p[d] += e[d];
        }
    }
    for (auto& v : ps.prototypes) {
        v /= k;
    }
    return ps;
}

namespace detail {

inline double norm2(const double* v, int dim) {
    double s = 0.0;
    for (int d = 0; d < dim; ++d) {
        s += v[d] * v[d];
    }
    return std::sqrt(s);
}

/// logits[q, c] = -|q - p_c|^2 or cos(q, p_c).
inline std::vector<double> prototype_logits(const PrototypeSet& ps, std::span<const double> queries) {
    const int dim = ps.dim;
    require(queries.size() % static_cast<std::size_t>(dim) == 0, "classify: query dimension mismatch");
    const auto nq = static_cast<int>(queries.size() / static_cast<std::size_t>(dim));
    std::vector<double> logits(static_cast<std::size_t>(nq) * ps.n_way);
    for (int q = 0; q < nq; ++q) {
        const double* x = queries.data() + static_cast<std::ptrdiff_t>(q) * dim;
        const double xn = ps.metric == Metric::cosine ? norm2(x, dim) : 1.0;
        if (ps.metric == Metric::cosine && xn == 0.0) {
            throw NumericalError("classify: zero-norm query embedding under cosine metric");
        }
        for (int c = 0; c < ps.n_way; ++c) {
            const double* p = ps.prototypes.data() + static_cast<std::ptrdiff_t>(c) * dim;
            double v = 0.0;
            if (ps.metric == Metric::squared_euclidean) {
                for (int d = 0; d < dim; ++d) {
                    const double diff = x[d] - p[d];
                    v += diff * diff;
                }
                v = -v;
            } else {
                const double pn = norm2(p, dim);
                if (pn == 0.0) {
                    throw NumericalError("classify: zero-norm prototype under cosine metric");
                }
                for (int d = 0; d < dim; ++d) {
                    v += x[d] * p[d];
                }
                v /= xn * pn;
            }
            logits[static_cast<std::size_t>(q * ps.n_way + c)] = v;
        }
    }
    return logits;
}

}  // namespace detail

/// Per-query probabilities over the n_way classes, softmax of negative distance.
inline std::vector<double> classify(const PrototypeSet& ps, std::span<const double> query_embeddings) {
    auto probs = detail::prototype_logits(ps, query_embeddings);
    const int n = ps.n_way;
    for (std::size_t row = 0; row < probs.size(); row += static_cast<std::size_t>(n)) {
        double mx = probs[row];
        for (int c = 1; c < n; ++c) {
            mx = std::max(mx, probs[row + static_cast<std::size_t>(c)]);
        }
        double z = 0.0;
        for (int c = 0; c < n; ++c) {
            auto& v = probs[row + static_cast<std::size_t>(c)];
            v = std::exp(v - mx);
            z += v;
        }
        for (int c = 0; c < n; ++c) {
            probs[row + static_cast<std::size_t>(c)] /= z;
        }
    }
    return probs;
}

struct ProtonetConfig {
    Metric metric = Metric::squared_euclidean;
    double momentum = 0.9;
    BnMode bn = BnMode::batch_stats();
};

/// Prototype cross-entropy over embeddings of support and target; gradients
/// w.r.t. both embedding sets are written when the output spans are non-empty.
inline LossResult prototype_loss(std::span<const double> support, std::span<const int> support_labels,
                                 std::span<const double> target, std::span<const int> target_labels, int n_way,
                                 int dim, Metric metric, std::span<double> d_support, std::span<double> d_target) {
    const auto ps = compute_prototypes(support, dim, support_labels, n_way, metric);
    const auto logits = detail::prototype_logits(ps, target);
    const auto nq = static_cast<int>(target_labels.size());
    const bool want_grad = !d_support.empty();
    std::vector<double> d_logits(want_grad ? logits.size() : 0);
    int hits = 0;
    const double loss = softmax_cross_entropy<double>(logits, nq, n_way, target_labels, d_logits, &hits);
    if (want_grad) {
        std::vector<double> d_proto(ps.prototypes.size(), 0.0);
        for (int q = 0; q < nq; ++q) {
            const double* x = target.data() + static_cast<std::ptrdiff_t>(q) * dim;
            double* dx = d_target.data() + static_cast<std::ptrdiff_t>(q) * dim;
            const double xn = metric == Metric::cosine ? detail::norm2(x, dim) : 1.0;
            for (int c = 0; c < n_way; ++c) {
                const double g = d_logits[static_cast<std::size_t>(q * n_way + c)];
                const double* p = ps.prototypes.data() + static_cast<std::ptrdiff_t>(c) * dim;
                double* dp = d_proto.data() + static_cast<std::ptrdiff_t>(c) * dim;
                if (metric == Metric::squared_euclidean) {
                    // logit = -|x - p|^2
                    for (int d = 0; d < dim; ++d) {
                        const double diff = x[d] - p[d];
                        dx[d] += -2.0 * g * diff;
                        dp[d] += 2.0 * g * diff;
                    }
                } else {
                    const double pn = detail::norm2(p, dim);
                    const double cosv = logits[static_cast<std::size_t>(q * n_way + c)];
                    for (int d = 0; d < dim; ++d) {
                        dx[d] += g * (p[d] / (xn * pn) - cosv * x[d] / (xn * xn));
                        dp[d] += g * (x[d] / (xn * pn) - cosv * p[d] / (pn * pn));
                    }
                }
            }
        }
        const int k = static_cast<int>(support_labels.size()) / n_way;
        for (std::size_t i = 0; i < support_labels.size(); ++i) {
            const double* dp = d_proto.data() + static_cast<std::ptrdiff_t>(support_labels[i]) * dim;
            double* ds = d_support.data() + static_cast<std::ptrdiff_t>(i) * dim;
            for (int d = 0; d < dim; ++d) {
                ds[d] += dp[d] / k;
            }
        }
    }
    return {loss, static_cast<double>(hits) / nq};
}

/// Episode loss and target accuracy. Support and target images go through the
/// backbone as one batch. Gradients are accumulated when the spans are non-empty.
inline LossResult protonet_episode_loss(const ConvBackboneParams& params, const Episode& ep,
                                        const ProtonetConfig& cfg, std::span<double> grad_weights = {},
                                        std::span<double> grad_norm = {}) {
    require(params.config.head == HeadKind::embedding, "protonet: backbone needs an embedding head");
    const auto input = concat(to_batch(ep.support_images), to_batch(ep.target_images));
    ForwardCache<double> cache;
    RunningStats stats = params.stats;
    forward<double>(params.config, params.weights, params.norm, input, cfg.bn, std::span<RunningStats>(&stats, 1),
                    false, cache);
    const int dim = params.config.embed_dim();
    const auto ns = ep.support_images.size() * static_cast<std::size_t>(dim);
    const std::span<const double> all(cache.output);
    const bool want_grad = !grad_weights.empty();
    std::vector<double> d_out(want_grad ? cache.output.size() : 0, 0.0);
    const std::span<double> d_all(d_out);
    const auto r = prototype_loss(all.first(ns), ep.support_labels, all.subspan(ns), ep.target_labels, ep.n_way, dim,
                                  cfg.metric, want_grad ? d_all.first(ns) : std::span<double>{},
                                  want_grad ? d_all.subspan(ns) : std::span<double>{});
    if (!std::isfinite(r.loss)) {
        throw NumericalError("protonet: non-finite episode loss");
    }
    if (want_grad) {
        backward<double>(params.config, params.weights, params.norm, cache, d_out, grad_weights, grad_norm);
    }
    return r;
}

/// Momentum buffer for protonet_meta_train_step.
struct SgdState {
    std::vector<double> weights;
    std::vector<double> norm;
};

/// One SGD (with momentum) step on the mean episode loss of `batch`.
inline ConvBackboneParams protonet_meta_train_step(const ConvBackboneParams& params, std::span<const Episode> batch,
                                                   double lr, const ProtonetConfig& cfg, SgdState& state,
                                                   double* mean_loss = nullptr) {
    require(lr >= 0.0, "protonet_meta_train_step: learning rate must be non-negative");
    require(!batch.empty(), "protonet_meta_train_step: empty batch");
    std::vector<double> gw(params.weights.size(), 0.0);
    std::vector<double> gn(params.norm.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        total += protonet_episode_loss(params, batch[i], cfg, gw, gn).loss;
    }
    const double scale = 1.0 / static_cast<double>(batch.size());
    if (!all_finite(gw) || !all_finite(gn)) {
        throw NumericalError("protonet_meta_train_step: non-finite gradient");
    }
    if (state.weights.size() != gw.size()) {
        state.weights.assign(gw.size(), 0.0);
        state.norm.assign(gn.size(), 0.0);
    }
    ConvBackboneParams out = params;
    auto step = [&](std::vector<double>& p, std::vector<double>& v, const std::vector<double>& g) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            v[i] = cfg.momentum * v[i] + g[i] * scale;
            p[i] -= lr * v[i];
        }
    };
    step(out.weights, state.weights, gw);
    step(out.norm, state.norm, gn);
    if (mean_loss) {
        *mean_loss = total * scale;
    }
    return out;
}

inline ConvBackboneParams protonet_meta_train_step(const ConvBackboneParams& params, std::span<const Episode> batch,
                                                   double lr, const ProtonetConfig& cfg = {}) {
    SgdState state;
    return protonet_meta_train_step(params, batch, lr, cfg, state);
}

inline double protonet_evaluate(const ConvBackboneParams& params, const Episode& ep, const ProtonetConfig& cfg = {}) {
    return protonet_episode_loss(params, ep, cfg).accuracy;
}

}  // namespace aal
