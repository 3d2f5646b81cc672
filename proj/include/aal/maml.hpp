#pragma once

// MAML with the MAML++ additions used here: per-layer per-step inner learning
// rates (LSLR), multi-step target loss (MSL), and per-step batch-norm weights
// and running statistics (BNWB / BNRS).
//
// Only the conv and head tensors are adapted in the inner loop. Batch-norm
// scale/shift are meta-learned (one set per inner step with BNWB) and never
// adapted. The support pass of step s and the target loss of the resulting
// parameters both use batch-norm set s.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "aal/backbone.hpp"
#include "aal/dual.hpp"
#include "aal/episode.hpp"
#include "aal/error.hpp"

namespace aal {

struct MamlConfig {
    int inner_steps = 5;
    bool second_order = true;
    bool msl_enabled = true;
    // Per-step target-loss weights when MSL is on; empty means uniform.
    std::vector<double> msl_weights;
    double meta_lr = 1e-3;
    double alpha_init = 0.1;
    bool learn_alpha = true;
    bool bnwb = true;
    bool bnrs = true;
    // Evaluation normalizes with batch statistics unless this is set, in
    // which case the (per-step, with BNRS) running statistics are used.
    bool eval_stored_stats = false;
    double alpha_floor = 1e-6;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate(bool allow_zero_steps = false) const {
        require(inner_steps >= (allow_zero_steps ? 0 : 1), "MamlConfig: inner_steps must be at least 1");
        require(meta_lr >= 0.0, "MamlConfig: meta_lr must be non-negative");
        require(alpha_init >= 0.0, "MamlConfig: alpha_init must be non-negative");
        if (msl_enabled && !msl_weights.empty()) {
            require(static_cast<int>(msl_weights.size()) == inner_steps, "MamlConfig: msl_weights must have T entries");
            require(std::all_of(msl_weights.begin(), msl_weights.end(), [](double w) { return w >= 0.0; }),
                    "MamlConfig: msl_weights must be non-negative");
            const double sum = std::accumulate(msl_weights.begin(), msl_weights.end(), 0.0);
            require(std::abs(sum - 1.0) <= 1e-9, "MamlConfig: msl_weights must sum to 1");
        }
    }

    /// Weight of the target loss after each inner step (index s-1 for step s).
    std::vector<double> step_weights() const {
        std::vector<double> w(static_cast<std::size_t>(inner_steps), 0.0);
        if (inner_steps == 0) {
            return w;
        }
        if (!msl_enabled) {
            w.back() = 1.0;
        } else if (!msl_weights.empty()) {
            w = msl_weights;
        } else {
            std::fill(w.begin(), w.end(), 1.0 / inner_steps);
        }
        return w;
    }
};

/// MSL schedule that starts uniform and moves weight onto the final step over
/// `anneal_epochs` epochs; non-final steps keep at least 0.03 / T.
inline std::vector<double> msl_annealed_weights(int inner_steps, int epoch, int anneal_epochs) {
    require(inner_steps >= 1 && anneal_epochs >= 1, "msl_annealed_weights: invalid arguments");
    const double t = inner_steps;
    const double decay = 1.0 / t / anneal_epochs;
    const double floor = 0.03 / t;
    std::vector<double> w(static_cast<std::size_t>(inner_steps));
    double rest = 0.0;
    for (int s = 0; s + 1 < inner_steps; ++s) {
        w[static_cast<std::size_t>(s)] = std::max(1.0 / t - epoch * decay, floor);
        rest += w[static_cast<std::size_t>(s)];
    }
    w.back() = 1.0 - rest;
    return w;
}

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    long long step = 0;

    friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// Learner state: initialization, batch-norm sets, inner learning rates.
struct MetaParams {
    BackboneConfig config;
    std::vector<double> theta;              // adapted tensors (conv + head)
    std::vector<std::vector<double>> norm;  // BN scale/shift; one set per step with BNWB, else one
    std::vector<RunningStats> stats;        // one set per step with BNRS, else one
    std::vector<double> alpha;              // layers x inner_steps, row-major
    int inner_steps = 0;
    AdamState adam;

    int layers() const { return static_cast<int>(make_layout(config).weights.size()); }
    double& lr(int layer, int step) { return alpha[static_cast<std::size_t>(layer * inner_steps + step)]; }
    double lr(int layer, int step) const { return alpha[static_cast<std::size_t>(layer * inner_steps + step)]; }
    const std::vector<double>& norm_for(int step) const {
        return norm[static_cast<std::size_t>(std::min<int>(step, static_cast<int>(norm.size()) - 1))];
    }
    int stats_index(int step) const { return std::min<int>(step, static_cast<int>(stats.size()) - 1); }

    /// The step-0 network as a plain backbone record.
    ConvBackboneParams backbone() const { return {config, theta, norm.front(), stats.front()}; }

    /// Learned parameters only (no optimizer state).
    bool same_parameters(const MetaParams& o) const {
        return config == o.config && theta == o.theta && norm == o.norm && stats == o.stats && alpha == o.alpha;
    }

    friend bool operator==(const MetaParams&, const MetaParams&) = default;
};

inline MetaParams init_meta_params(const BackboneConfig& backbone_cfg, const MamlConfig& cfg, RngStream& rng) {
    cfg.validate();
    require(backbone_cfg.head == HeadKind::linear, "MAML needs a linear head");
    const auto base = init_backbone(backbone_cfg, rng);
    MetaParams mp;
    mp.config = backbone_cfg;
    mp.theta = base.weights;
    mp.inner_steps = cfg.inner_steps;
    mp.norm.assign(cfg.bnwb ? static_cast<std::size_t>(cfg.inner_steps) : 1, base.norm);
    mp.stats.assign(cfg.bnrs ? static_cast<std::size_t>(cfg.inner_steps) : 1, base.stats);
    mp.alpha.assign(static_cast<std::size_t>(mp.layers() * cfg.inner_steps), cfg.alpha_init);
    return mp;
}

/// Parameters after each inner step; thetas[0] is the initialization.
struct AdaptedTrajectory {
    std::vector<std::vector<double>> thetas;    // T + 1
    std::vector<std::vector<double>> grads;     // T, support gradient at thetas[s]
    std::vector<double> support_losses;         // T
};

struct LabeledBatch {
    InputBatch images;
    std::vector<int> labels;
};

inline LabeledBatch support_batch(const Episode& ep) { return {to_batch(ep.support_images), ep.support_labels}; }
inline LabeledBatch target_batch(const Episode& ep) { return {to_batch(ep.target_images), ep.target_labels}; }

namespace detail {

inline void require_compatible(const MetaParams& mp, const MamlConfig& cfg) {
    require(mp.inner_steps == cfg.inner_steps, "MAML: MetaParams were built for a different number of inner steps");
    require(static_cast<int>(mp.alpha.size()) == mp.layers() * mp.inner_steps, "MAML: alpha shape mismatch");
    require(std::all_of(mp.alpha.begin(), mp.alpha.end(), [](double a) { return a >= 0.0; }),
            "MAML: inner learning rates must be non-negative");
}

inline std::vector<RunningStats> stats_copy(const MetaParams& mp) { return mp.stats; }

}  // namespace detail

/// Unrolled per-layer SGD: theta_s = theta_{s-1} - alpha[l, s] * grad(theta_{s-1})
/// on every tensor slot l. `grad_fn(step, theta, grad_out) -> loss` fills the
/// gradient at the current parameters.
template <class GradFn>
AdaptedTrajectory unroll_sgd(const std::vector<double>& theta0, std::span<const TensorSlot> layers,
                             std::span<const double> alpha, int steps, int alpha_steps, GradFn&& grad_fn) {
    require(alpha.size() >= layers.size() * static_cast<std::size_t>(alpha_steps) && steps <= alpha_steps,
            "unroll_sgd: learning-rate table too small");
    AdaptedTrajectory tr;
    tr.thetas.push_back(theta0);
    for (int s = 0; s < steps; ++s) {
        const auto& theta = tr.thetas.back();
        std::vector<double> grad(theta.size(), 0.0);
        const double loss = grad_fn(s, theta, grad);
        if (!std::isfinite(loss) || !all_finite(grad)) {
            throw NumericalError("inner loop: non-finite support loss or gradient at step " + std::to_string(s + 1));
        }
        std::vector<double> next = theta;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const double a = alpha[l * static_cast<std::size_t>(alpha_steps) + static_cast<std::size_t>(s)];
            for (std::size_t i = layers[l].offset; i < layers[l].offset + layers[l].size; ++i) {
                next[i] -= a * grad[i];
            }
        }
        tr.support_losses.push_back(loss);
        tr.grads.push_back(std::move(grad));
        tr.thetas.push_back(std::move(next));
    }
    return tr;
}

/// Inner-loop SGD on the support set. When `stats_bank` is non-null, the
/// running statistics of each step's batch-norm set are updated in it.
inline AdaptedTrajectory inner_adapt(const MetaParams& mp, const MamlConfig& cfg, const LabeledBatch& support,
                                     std::vector<RunningStats>* stats_bank = nullptr, int steps = -1) {
    const int t_steps = steps < 0 ? cfg.inner_steps : steps;
    const auto layout = make_layout(mp.config);
    std::vector<RunningStats> scratch;
    std::vector<RunningStats>& bank = stats_bank ? *stats_bank : (scratch = mp.stats);
    return unroll_sgd(mp.theta, layout.weights, mp.alpha, t_steps, mp.inner_steps,
                      [&](int s, const std::vector<double>& theta, std::vector<double>& grad) {
                          std::vector<double> gn(mp.norm_for(s).size(), 0.0);
                          return classifier_loss<double>(mp.config, theta, mp.norm_for(s), support.images,
                                                         support.labels, BnMode::batch_stats(mp.stats_index(s)), bank,
                                                         stats_bank != nullptr, grad, gn);
                      });
}

inline AdaptedTrajectory inner_adapt(const MetaParams& mp, const MamlConfig& cfg, const Episode& ep) {
    cfg.validate();
    detail::require_compatible(mp, cfg);
    return inner_adapt(mp, cfg, support_batch(ep));
}

/// Target loss after adaptation: MSL-weighted sum over steps, or the final step only.
inline double outer_loss(const MetaParams& mp, const MamlConfig& cfg, const Episode& ep) {
    cfg.validate();
    detail::require_compatible(mp, cfg);
    const auto tr = inner_adapt(mp, cfg, support_batch(ep));
    const auto target = target_batch(ep);
    const auto weights = cfg.step_weights();
    auto bank = mp.stats;
    double total = 0.0;
    for (int s = 1; s <= cfg.inner_steps; ++s) {
        const double w = weights[static_cast<std::size_t>(s - 1)];
        if (w == 0.0) {
            continue;
        }
        const double l = classifier_loss<double>(mp.config, tr.thetas[static_cast<std::size_t>(s)],
                                                 mp.norm_for(s - 1), target.images, target.labels,
                                                 BnMode::batch_stats(), bank, false, {}, {});
        total += w * l;
    }
    return total;
}

/// Gradient of the outer loss w.r.t. the initialization, the batch-norm sets and the inner rates.
struct MetaGradient {
    double loss = 0.0;
    std::vector<double> theta;
    std::vector<std::vector<double>> norm;
    std::vector<double> alpha;
};

namespace detail {

/// Hessian-vector product of the support loss at (theta, norm) with tangent
/// (u, 0): returns (H_theta,theta u, H_norm,theta u).
inline std::pair<std::vector<double>, std::vector<double>> support_hvp(const MetaParams& mp, int step,
                                                                       const std::vector<double>& theta,
                                                                       const std::vector<double>& u,
                                                                       const LabeledBatch& support) {
    const auto& norm = mp.norm_for(step);
    std::vector<Dual> tw(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        tw[i] = Dual(theta[i], u[i]);
    }
    std::vector<Dual> tn(norm.begin(), norm.end());
    std::vector<Dual> gw(theta.size());
    std::vector<Dual> gn(norm.size());
    auto bank = mp.stats;
    classifier_loss<Dual>(mp.config, tw, tn, support.images, support.labels, BnMode::batch_stats(), bank, false, gw,
                          gn);
    std::pair<std::vector<double>, std::vector<double>> out;
    out.first.resize(gw.size());
    out.second.resize(gn.size());
    for (std::size_t i = 0; i < gw.size(); ++i) {
        out.first[i] = gw[i].d;
    }
    for (std::size_t i = 0; i < gn.size(); ++i) {
        out.second[i] = gn[i].d;
    }
    return out;
}

}  // namespace detail

/// Meta-gradient for one episode by reverse accumulation through the unrolled
/// inner loop. Second-order terms use exact Hessian-vector products; the
/// first-order approximation drops them.
inline MetaGradient meta_gradient(const MetaParams& mp, const MamlConfig& cfg, const Episode& ep,
                                  std::vector<RunningStats>* stats_bank = nullptr) {
    cfg.validate();
    detail::require_compatible(mp, cfg);
    const auto layout = make_layout(mp.config);
    const int t_steps = cfg.inner_steps;
    const auto support = support_batch(ep);
    const auto target = target_batch(ep);
    const auto tr = inner_adapt(mp, cfg, support, stats_bank);
    const auto weights = cfg.step_weights();

    MetaGradient g;
    g.theta.assign(mp.theta.size(), 0.0);
    g.norm.assign(mp.norm.size(), std::vector<double>(mp.norm.front().size(), 0.0));
    g.alpha.assign(mp.alpha.size(), 0.0);
    auto bank = mp.stats;

    std::vector<double>& lambda = g.theta;  // adjoint of theta_s, walking s = T..0
    for (int s = t_steps; s >= 1; --s) {
        const double w = weights[static_cast<std::size_t>(s - 1)];
        const auto norm_slot = static_cast<std::size_t>(std::min<int>(s - 1, static_cast<int>(mp.norm.size()) - 1));
        if (w != 0.0) {
            std::vector<double> gw(mp.theta.size(), 0.0);
            std::vector<double> gn(mp.norm.front().size(), 0.0);
            const double l = classifier_loss<double>(mp.config, tr.thetas[static_cast<std::size_t>(s)],
                                                     mp.norm_for(s - 1), target.images, target.labels,
                                                     BnMode::batch_stats(), bank, false, gw, gn);
            if (!std::isfinite(l)) {
                throw NumericalError("meta_gradient: non-finite target loss at step " + std::to_string(s));
            }
            g.loss += w * l;
            for (std::size_t i = 0; i < gw.size(); ++i) {
                lambda[i] += w * gw[i];
            }
            for (std::size_t i = 0; i < gn.size(); ++i) {
                g.norm[norm_slot][i] += w * gn[i];
            }
        }
        // theta_s = theta_{s-1} - alpha_s * grad_s(theta_{s-1})
        const auto& grad = tr.grads[static_cast<std::size_t>(s - 1)];
        std::vector<double> u(lambda.size());
        for (std::size_t l = 0; l < layout.weights.size(); ++l) {
            const auto& slot = layout.weights[l];
            double dot = 0.0;
            const double a = mp.lr(static_cast<int>(l), s - 1);
            for (std::size_t i = slot.offset; i < slot.offset + slot.size; ++i) {
                dot += lambda[i] * grad[i];
                u[i] = a * lambda[i];
            }
            g.alpha[l * static_cast<std::size_t>(t_steps) + static_cast<std::size_t>(s - 1)] = -dot;
        }
        if (cfg.second_order) {
            const auto [h_theta, h_norm] =
                detail::support_hvp(mp, s - 1, tr.thetas[static_cast<std::size_t>(s - 1)], u, support);
            for (std::size_t i = 0; i < lambda.size(); ++i) {
                lambda[i] -= h_theta[i];
            }
            for (std::size_t i = 0; i < h_norm.size(); ++i) {
                g.norm[norm_slot][i] -= h_norm[i];
            }
        }
    }
    if (!std::isfinite(g.loss) || !all_finite(g.theta) || !all_finite(g.alpha)) {
        throw NumericalError("meta_gradient: non-finite meta-gradient");
    }
    return g;
}

/// One meta-optimizer (Adam) step on the mean outer loss of `batch`. Inner
/// rates are clamped at `alpha_floor` afterwards. Running statistics are
/// updated by the support passes.
inline MetaParams meta_update(const MetaParams& mp, const MamlConfig& cfg, std::span<const Episode> batch,
                              double* mean_loss = nullptr) {
    cfg.validate();
    detail::require_compatible(mp, cfg);
    require(!batch.empty(), "meta_update: empty batch");
    MetaParams out = mp;
    MetaGradient total;
    total.theta.assign(mp.theta.size(), 0.0);
    total.norm.assign(mp.norm.size(), std::vector<double>(mp.norm.front().size(), 0.0));
    total.alpha.assign(mp.alpha.size(), 0.0);
    for (std::size_t e = 0; e < batch.size(); ++e) {
        MetaGradient g;
        try {
            g = meta_gradient(mp, cfg, batch[e], &out.stats);
        } catch (const NumericalError& err) {
            throw NumericalError("meta_update: episode " + std::to_string(e) + ": " + err.what());
        }
        total.loss += g.loss;
        for (std::size_t i = 0; i < g.theta.size(); ++i) {
            total.theta[i] += g.theta[i];
        }
        for (std::size_t k = 0; k < g.norm.size(); ++k) {
            for (std::size_t i = 0; i < g.norm[k].size(); ++i) {
                total.norm[k][i] += g.norm[k][i];
            }
        }
        for (std::size_t i = 0; i < g.alpha.size(); ++i) {
            total.alpha[i] += g.alpha[i];
        }
    }
    const double scale = 1.0 / static_cast<double>(batch.size());
    if (mean_loss) {
        *mean_loss = total.loss * scale;
    }

    // Flatten [theta, norm sets, alpha] for Adam.
    std::vector<double*> params;
    std::vector<double> grads;
    auto push = [&](std::vector<double>& p, const std::vector<double>& gp) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            params.push_back(&p[i]);
            grads.push_back(gp[i] * scale);
        }
    };
    push(out.theta, total.theta);
    for (std::size_t k = 0; k < out.norm.size(); ++k) {
        push(out.norm[k], total.norm[k]);
    }
    if (cfg.learn_alpha) {
        push(out.alpha, total.alpha);
    }
    auto& adam = out.adam;
    if (adam.m.size() != grads.size()) {
        adam = AdamState{std::vector<double>(grads.size(), 0.0), std::vector<double>(grads.size(), 0.0), 0};
    }
    ++adam.step;
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(adam.step));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(adam.step));
    for (std::size_t i = 0; i < grads.size(); ++i) {
        adam.m[i] = cfg.adam_beta1 * adam.m[i] + (1.0 - cfg.adam_beta1) * grads[i];
        adam.v[i] = cfg.adam_beta2 * adam.v[i] + (1.0 - cfg.adam_beta2) * grads[i] * grads[i];
        const double mhat = adam.m[i] / bc1;
        const double vhat = adam.v[i] / bc2;
        *params[i] -= cfg.meta_lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
    if (cfg.learn_alpha && cfg.meta_lr > 0.0) {
        for (auto& a : out.alpha) {
            a = std::max(a, cfg.alpha_floor);
        }
    }
    return out;
}

/// Adapts on the episode's support set and returns the target accuracy of the
/// adapted network. `mp` is not modified.
inline double maml_evaluate(const MetaParams& mp, const MamlConfig& cfg, const Episode& ep) {
    cfg.validate(true);
    require(cfg.inner_steps <= mp.inner_steps, "maml_evaluate: more inner steps than learned rates");
    require(std::all_of(mp.alpha.begin(), mp.alpha.end(), [](double a) { return a >= 0.0; }),
            "maml_evaluate: inner learning rates must be non-negative");
    const auto support = support_batch(ep);
    const auto target = target_batch(ep);
    const auto tr = inner_adapt(mp, cfg, support, nullptr, cfg.inner_steps);
    const int last = std::max(cfg.inner_steps - 1, 0);
    auto bank = mp.stats;
    const BnMode mode = !cfg.eval_stored_stats ? BnMode::batch_stats()
                                               : (mp.stats.size() > 1 ? BnMode::per_step(mp.stats_index(last))
                                                                      : BnMode::stored());
    double acc = 0.0;
    classifier_loss<double>(mp.config, tr.thetas.back(), mp.norm_for(last), target.images, target.labels, mode, bank,
                            false, {}, {}, &acc);
    return acc;
}

}  // namespace aal
