#pragma once

// Four-block convolutional feature extractor (conv 3x3 -> batch norm -> ReLU
// -> 2x2 max-pool) with either a linear classification head or the flattened
// final feature map as an embedding.
//
// Forward and backward passes are written once, templated on the scalar type.
// With `double` they give loss gradients; with `Dual` seeded by a tangent they
// give exact Hessian-vector products of the same loss.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "aal/detail/gemm.hpp"
#include "aal/dual.hpp"
#include "aal/error.hpp"
#include "aal/image.hpp"
#include "aal/rng.hpp"

namespace aal {

enum class HeadKind { linear, embedding };

inline std::string to_string(HeadKind h) { return h == HeadKind::linear ? "linear" : "embedding"; }

struct BackboneConfig {
    int input_channels = 1;
    int image_side = 28;
    int filters = 64;
    int blocks = 4;
    HeadKind head = HeadKind::embedding;
    int n_out = 0;  // linear head only

    static BackboneConfig omniglot(HeadKind head, int n_out = 0) { return {1, 28, 64, 4, head, n_out}; }
    static BackboneConfig miniimagenet(HeadKind head, int n_out = 0) { return {3, 84, 64, 4, head, n_out}; }

    void validate() const {
        require(input_channels == 1 || input_channels == 3, "backbone: input channels must be 1 or 3");
        require(filters > 0 && blocks > 0, "backbone: filters and blocks must be positive");
        require(head == HeadKind::embedding || n_out > 0, "backbone: linear head needs n_out > 0");
        require(feature_side() >= 1, "backbone: image too small for the number of pooling blocks");
    }

    /// Spatial side at the input of block b (floor halving per block).
    int side_at(int b) const {
        int s = image_side;
        for (int i = 0; i < b; ++i) {
            s /= 2;
        }
        return s;
    }
    int feature_side() const { return side_at(blocks); }
    int embed_dim() const { return filters * feature_side() * feature_side(); }
    int block_in_channels(int b) const { return b == 0 ? input_channels : filters; }
    int output_dim() const { return head == HeadKind::linear ? n_out : embed_dim(); }

    friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

struct TensorSlot {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

/// Offsets of every parameter tensor. `weights` holds the conv and head
/// tensors (the ones adapted in an inner loop); `norm` holds the batch-norm
/// scale and shift.
struct ParamLayout {
    std::vector<TensorSlot> weights;
    std::vector<TensorSlot> norm;
    std::size_t weight_count = 0;
    std::size_t norm_count = 0;
    int blocks = 0;
    bool has_head = false;

    const TensorSlot& conv_weight(int b) const { return weights[static_cast<std::size_t>(2 * b)]; }
    const TensorSlot& conv_bias(int b) const { return weights[static_cast<std::size_t>(2 * b + 1)]; }
    const TensorSlot& head_weight() const { return weights[static_cast<std::size_t>(2 * blocks)]; }
    const TensorSlot& head_bias() const { return weights[static_cast<std::size_t>(2 * blocks + 1)]; }
    const TensorSlot& bn_gamma(int b) const { return norm[static_cast<std::size_t>(2 * b)]; }
    const TensorSlot& bn_beta(int b) const { return norm[static_cast<std::size_t>(2 * b + 1)]; }
};

inline ParamLayout make_layout(const BackboneConfig& cfg) {
    cfg.validate();
    ParamLayout l;
    l.blocks = cfg.blocks;
    auto add = [](std::vector<TensorSlot>& v, std::size_t& count, std::string name, std::vector<int> shape) {
        std::size_t n = 1;
        for (const int s : shape) {
            n *= static_cast<std::size_t>(s);
        }
        v.push_back({std::move(name), std::move(shape), count, n});
        count += n;
    };
    for (int b = 0; b < cfg.blocks; ++b) {
        const std::string p = "block" + std::to_string(b + 1);
        add(l.weights, l.weight_count, p + ".conv.weight", {cfg.filters, cfg.block_in_channels(b), 3, 3});
        add(l.weights, l.weight_count, p + ".conv.bias", {cfg.filters});
        add(l.norm, l.norm_count, p + ".bn.weight", {cfg.filters});
        add(l.norm, l.norm_count, p + ".bn.bias", {cfg.filters});
    }
    if (cfg.head == HeadKind::linear) {
        l.has_head = true;
        add(l.weights, l.weight_count, "head.weight", {cfg.n_out, cfg.embed_dim()});
        add(l.weights, l.weight_count, "head.bias", {cfg.n_out});
    }
    return l;
}

/// Batch-norm running statistics, blocks * filters entries each.
struct RunningStats {
    std::vector<double> mean;
    std::vector<double> var;

    static RunningStats initial(const BackboneConfig& cfg) {
        const auto n = static_cast<std::size_t>(cfg.blocks) * cfg.filters;
        return {std::vector<double>(n, 0.0), std::vector<double>(n, 1.0)};
    }

    friend bool operator==(const RunningStats&, const RunningStats&) = default;
};

struct ConvBackboneParams {
    BackboneConfig config;
    std::vector<double> weights;
    std::vector<double> norm;
    RunningStats stats;

    friend bool operator==(const ConvBackboneParams&, const ConvBackboneParams&) = default;
};

/// Fan-in scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for conv and
/// linear tensors; BN scale 1, shift 0; running mean 0, variance 1.
inline ConvBackboneParams init_backbone(const BackboneConfig& cfg, RngStream& rng) {
    const auto layout = make_layout(cfg);
    ConvBackboneParams p{cfg, std::vector<double>(layout.weight_count), std::vector<double>(layout.norm_count),
                         RunningStats::initial(cfg)};
    auto fill = [&](const TensorSlot& slot, double fan_in) {
        const double bound = 1.0 / std::sqrt(fan_in);
        for (std::size_t i = 0; i < slot.size; ++i) {
            p.weights[slot.offset + i] = rng.uniform(-bound, bound);
        }
    };
    for (int b = 0; b < cfg.blocks; ++b) {
        const double fan_in = cfg.block_in_channels(b) * 9.0;
        fill(layout.conv_weight(b), fan_in);
        fill(layout.conv_bias(b), fan_in);
        const auto& g = layout.bn_gamma(b);
        std::fill_n(p.norm.begin() + static_cast<std::ptrdiff_t>(g.offset), g.size, 1.0);
    }
    if (layout.has_head) {
        fill(layout.head_weight(), cfg.embed_dim());
        fill(layout.head_bias(), cfg.embed_dim());
    }
    return p;
}

/// Which statistics batch norm normalizes with.
struct BnMode {
    enum class Kind { batch, stored, per_step };
    Kind kind = Kind::batch;
    // per_step: the statistics set to read. batch: the set to update, if updating.
    int step = 0;

    static BnMode batch_stats(int step = 0) { return {Kind::batch, step}; }
    static BnMode stored() { return {Kind::stored, 0}; }
    static BnMode per_step(int step) { return {Kind::per_step, step}; }
};

inline constexpr double bn_epsilon = 1e-5;
inline constexpr double bn_momentum = 0.1;

/// NCHW image batch in double precision.
struct InputBatch {
    int n = 0;
    int channels = 0;
    int side = 0;
    std::vector<double> data;
};

inline InputBatch to_batch(std::span<const ImageTensor> images) {
    require(!images.empty(), "to_batch: empty batch");
    const auto& first = images.front();
    require(first.height() == first.width(), "to_batch: images must be square");
    InputBatch b{static_cast<int>(images.size()), first.channels(), first.height(), {}};
    const auto plane = static_cast<std::size_t>(b.side) * b.side;
    b.data.resize(plane * b.channels * b.n);
    for (int i = 0; i < b.n; ++i) {
        const auto& img = images[static_cast<std::size_t>(i)];
        require(img.same_shape(first), "to_batch: images differ in shape");
        for (int c = 0; c < b.channels; ++c) {
            double* dst = b.data.data() + (static_cast<std::size_t>(i) * b.channels + c) * plane;
            for (int y = 0; y < b.side; ++y) {
                for (int x = 0; x < b.side; ++x) {
                    dst[static_cast<std::size_t>(y) * b.side + x] = img.at(y, x, c);
                }
            }
        }
    }
    return b;
}

/// Concatenation of two batches with the same image shape.
inline InputBatch concat(const InputBatch& a, const InputBatch& b) {
    require(a.channels == b.channels && a.side == b.side, "concat: batch shapes differ");
    InputBatch out{a.n + b.n, a.channels, a.side, a.data};
    out.data.insert(out.data.end(), b.data.begin(), b.data.end());
    return out;
}

template <class T>
struct BlockCache {
    int in_channels = 0;
    int side = 0;
    int out_side = 0;
    std::vector<T> input;   // N x Cin x S x S
    std::vector<T> xhat;    // N x F x S x S, normalized conv output
    std::vector<T> pre;     // N x F x S x S, BN output before ReLU
    std::vector<int> argmax;  // N x F x S/2 x S/2, flat index into the S x S plane
    std::vector<T> invstd;  // F
    std::vector<T> pooled;  // N x F x S/2 x S/2
    bool batch_stats = true;
};

template <class T>
struct ForwardCache {
    int n = 0;
    std::vector<BlockCache<T>> blocks;
    std::vector<T> output;  // N x output_dim
};

namespace detail {

// col(K x S*S), K = C*9; rows ordered (c, ky, kx) to match the weight layout.
template <class T>
void im2col(const T* in, int channels, int side, T* col) {
    const int plane = side * side;
    for (int c = 0; c < channels; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                T* row = col + static_cast<std::ptrdiff_t>((c * 9 + ky * 3 + kx) * plane);
                for (int y = 0; y < side; ++y) {
                    const int sy = y + ky - 1;
                    for (int x = 0; x < side; ++x) {
                        const int sx = x + kx - 1;
                        row[y * side + x] = (sy < 0 || sy >= side || sx < 0 || sx >= side)
                                                ? T(0.0)
                                                : in[static_cast<std::ptrdiff_t>(c * plane + sy * side + sx)];
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* col, int channels, int side, T* in) {
    const int plane = side * side;
    for (int c = 0; c < channels; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const T* row = col + static_cast<std::ptrdiff_t>((c * 9 + ky * 3 + kx) * plane);
                for (int y = 0; y < side; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= side) {
                        continue;
                    }
                    for (int x = 0; x < side; ++x) {
                        const int sx = x + kx - 1;
                        if (sx >= 0 && sx < side) {
                            in[static_cast<std::ptrdiff_t>(c * plane + sy * side + sx)] += row[y * side + x];
                        }
                    }
                }
            }
        }
    }
}

template <class T>
T relu(const T& x) {
    return value_of(x) > 0.0 ? x : T(0.0);
}

template <class T>
T to_scalar(double v) {
    return T(v);
}

}  // namespace detail

/// Forward pass. In batch mode with `update_stats`, the running statistics set
/// `bank[mode.step]` is updated (value part only). Stored mode reads bank[0],
/// per-step mode reads bank[mode.step].
template <class T>
void forward(const BackboneConfig& cfg, std::span<const T> weights, std::span<const T> norm, const InputBatch& input,
             BnMode mode, std::span<RunningStats> bank, bool update_stats, ForwardCache<T>& cache) {
    const auto layout = make_layout(cfg);
    require(weights.size() == layout.weight_count && norm.size() == layout.norm_count,
            "forward: parameter vector does not match the backbone layout");
    require(input.channels == cfg.input_channels && input.side == cfg.image_side,
            "forward: image shape does not match the backbone (expected " + std::to_string(cfg.image_side) + "x" +
                std::to_string(cfg.image_side) + "x" + std::to_string(cfg.input_channels) + ")");
    require(input.n > 0, "forward: empty batch");
    const RunningStats* stored = nullptr;
    if (mode.kind != BnMode::Kind::batch || update_stats) {
        require(mode.step >= 0 && static_cast<std::size_t>(mode.step) < bank.size(),
                "forward: no running statistics for the requested step");
        stored = &bank[static_cast<std::size_t>(mode.kind == BnMode::Kind::stored ? 0 : mode.step)];
    }

    const int n = input.n;
    const int f = cfg.filters;
    cache.n = n;
    cache.blocks.resize(static_cast<std::size_t>(cfg.blocks));

    std::vector<T> current(input.data.begin(), input.data.end());
    std::vector<T> col;
    for (int b = 0; b < cfg.blocks; ++b) {
        auto& bc = cache.blocks[static_cast<std::size_t>(b)];
        bc.in_channels = cfg.block_in_channels(b);
        bc.side = cfg.side_at(b);
        bc.out_side = bc.side / 2;
        bc.batch_stats = mode.kind == BnMode::Kind::batch;
        bc.input = std::move(current);
        const int s = bc.side;
        const int plane = s * s;
        const int k = bc.in_channels * 9;
        const T* w = weights.data() + layout.conv_weight(b).offset;
        const T* bias = weights.data() + layout.conv_bias(b).offset;
        const T* gamma = norm.data() + layout.bn_gamma(b).offset;
        const T* beta = norm.data() + layout.bn_beta(b).offset;

        // Convolution.
        std::vector<T> z(static_cast<std::size_t>(n) * f * plane);
        col.resize(static_cast<std::size_t>(k) * plane);
        for (int i = 0; i < n; ++i) {
            detail::im2col(bc.input.data() + static_cast<std::ptrdiff_t>(i) * bc.in_channels * plane, bc.in_channels,
                           s, col.data());
            T* zi = z.data() + static_cast<std::ptrdiff_t>(i) * f * plane;
            detail::gemm(false, false, f, plane, k, w, col.data(), zi, false);
            for (int ch = 0; ch < f; ++ch) {
                for (int p = 0; p < plane; ++p) {
                    zi[ch * plane + p] += bias[ch];
                }
            }
        }

        // Batch norm.
        bc.invstd.assign(static_cast<std::size_t>(f), T(0.0));
        bc.xhat.resize(z.size());
        const double count = static_cast<double>(n) * plane;
        for (int ch = 0; ch < f; ++ch) {
            T mean(0.0);
            T var(0.0);
            if (bc.batch_stats) {
                for (int i = 0; i < n; ++i) {
                    const T* zp = z.data() + (static_cast<std::ptrdiff_t>(i) * f + ch) * plane;
                    for (int p = 0; p < plane; ++p) {
                        mean += zp[p];
                    }
                }
                mean = mean / count;
                // Second pass corrects the rounding of the first (exact for constant channels).
                T correction(0.0);
                for (int i = 0; i < n; ++i) {
                    const T* zp = z.data() + (static_cast<std::ptrdiff_t>(i) * f + ch) * plane;
                    for (int p = 0; p < plane; ++p) {
                        correction += zp[p] - mean;
                    }
                }
                mean = mean + correction / count;
                for (int i = 0; i < n; ++i) {
                    const T* zp = z.data() + (static_cast<std::ptrdiff_t>(i) * f + ch) * plane;
                    for (int p = 0; p < plane; ++p) {
                        const T dlt = zp[p] - mean;
                        var += dlt * dlt;
                    }
                }
                var = var / count;
                if (update_stats) {
                    auto& st = bank[static_cast<std::size_t>(mode.step)];
                    const auto idx = static_cast<std::size_t>(b * f + ch);
                    const double unbiased = count > 1.0 ? value_of(var) * count / (count - 1.0) : value_of(var);
                    st.mean[idx] = (1.0 - bn_momentum) * st.mean[idx] + bn_momentum * value_of(mean);
                    st.var[idx] = (1.0 - bn_momentum) * st.var[idx] + bn_momentum * unbiased;
                }
            } else {
                const auto idx = static_cast<std::size_t>(b * f + ch);
                mean = T(stored->mean[idx]);
                var = T(stored->var[idx]);
            }
            using std::sqrt;
            const T inv = T(1.0) / sqrt(var + bn_epsilon);
            bc.invstd[static_cast<std::size_t>(ch)] = inv;
            for (int i = 0; i < n; ++i) {
                const auto off = (static_cast<std::ptrdiff_t>(i) * f + ch) * plane;
                for (int p = 0; p < plane; ++p) {
                    bc.xhat[static_cast<std::size_t>(off + p)] = (z[static_cast<std::size_t>(off + p)] - mean) * inv;
                }
            }
        }
        bc.pre.resize(z.size());
        for (int i = 0; i < n; ++i) {
            for (int ch = 0; ch < f; ++ch) {
                const auto off = static_cast<std::size_t>((static_cast<std::ptrdiff_t>(i) * f + ch) * plane);
                for (int p = 0; p < plane; ++p) {
                    bc.pre[off + p] = gamma[ch] * bc.xhat[off + p] + beta[ch];
                }
            }
        }

        // ReLU + 2x2 max-pool (floor on odd sides).
        const int os = bc.out_side;
        const int oplane = os * os;
        bc.pooled.assign(static_cast<std::size_t>(n) * f * oplane, T(0.0));
        bc.argmax.assign(bc.pooled.size(), 0);
        for (int i = 0; i < n; ++i) {
            for (int ch = 0; ch < f; ++ch) {
                const auto off = static_cast<std::size_t>((static_cast<std::ptrdiff_t>(i) * f + ch) * plane);
                const auto ooff = static_cast<std::size_t>((static_cast<std::ptrdiff_t>(i) * f + ch) * oplane);
                for (int oy = 0; oy < os; ++oy) {
                    for (int ox = 0; ox < os; ++ox) {
                        int best = (2 * oy) * s + 2 * ox;
                        T best_v = detail::relu(bc.pre[off + static_cast<std::size_t>(best)]);
                        for (int dy = 0; dy < 2; ++dy) {
                            for (int dx = 0; dx < 2; ++dx) {
                                const int idx = (2 * oy + dy) * s + 2 * ox + dx;
                                const T v = detail::relu(bc.pre[off + static_cast<std::size_t>(idx)]);
                                if (value_of(v) > value_of(best_v)) {
                                    best_v = v;
                                    best = idx;
                                }
                            }
                        }
                        bc.pooled[ooff + static_cast<std::size_t>(oy * os + ox)] = best_v;
                        bc.argmax[ooff + static_cast<std::size_t>(oy * os + ox)] = best;
                    }
                }
            }
        }
        current = bc.pooled;
    }

    // `current` is N x embed_dim, flattened channel-major.
    if (cfg.head == HeadKind::linear) {
        const int d = cfg.embed_dim();
        const T* hw = weights.data() + layout.head_weight().offset;
        const T* hb = weights.data() + layout.head_bias().offset;
        cache.output.assign(static_cast<std::size_t>(n) * cfg.n_out, T(0.0));
        // Row by row so each output is independent of the batch size.
        for (int i = 0; i < n; ++i) {
            detail::gemm(false, true, 1, cfg.n_out, d, current.data() + static_cast<std::ptrdiff_t>(i) * d, hw,
                         cache.output.data() + static_cast<std::ptrdiff_t>(i) * cfg.n_out, false);
        }
        for (int i = 0; i < n; ++i) {
            for (int o = 0; o < cfg.n_out; ++o) {
                cache.output[static_cast<std::size_t>(i * cfg.n_out + o)] += hb[o];
            }
        }
    } else {
        cache.output = std::move(current);
    }
}

/// Accumulates d(loss)/d(weights) into `grad_weights` and d(loss)/d(norm) into
/// `grad_norm`, given d(loss)/d(output) for the cached forward pass.
template <class T>
void backward(const BackboneConfig& cfg, std::span<const T> weights, std::span<const T> norm,
              const ForwardCache<T>& cache, std::span<const T> d_output, std::span<T> grad_weights,
              std::span<T> grad_norm) {
    const auto layout = make_layout(cfg);
    require(grad_weights.size() == layout.weight_count && grad_norm.size() == layout.norm_count,
            "backward: gradient buffers do not match the backbone layout");
    const int n = cache.n;
    const int f = cfg.filters;
    require(d_output.size() == static_cast<std::size_t>(n) * cfg.output_dim(), "backward: output gradient size");

    std::vector<T> d_feat;
    if (cfg.head == HeadKind::linear) {
        const int d = cfg.embed_dim();
        const auto& features = cache.blocks.back().pooled;
        const T* hw = weights.data() + layout.head_weight().offset;
        T* ghw = grad_weights.data() + layout.head_weight().offset;
        T* ghb = grad_weights.data() + layout.head_bias().offset;
        detail::gemm(true, false, cfg.n_out, d, n, d_output.data(), features.data(), ghw, true);
        for (int i = 0; i < n; ++i) {
            for (int o = 0; o < cfg.n_out; ++o) {
                ghb[o] += d_output[static_cast<std::size_t>(i * cfg.n_out + o)];
            }
        }
        d_feat.assign(static_cast<std::size_t>(n) * d, T(0.0));
        detail::gemm(false, false, n, d, cfg.n_out, d_output.data(), hw, d_feat.data(), false);
    } else {
        d_feat.assign(d_output.begin(), d_output.end());
    }

    std::vector<T> col;
    std::vector<T> dcol;
    for (int b = cfg.blocks - 1; b >= 0; --b) {
        const auto& bc = cache.blocks[static_cast<std::size_t>(b)];
        const int s = bc.side;
        const int plane = s * s;
        const int os = bc.out_side;
        const int oplane = os * os;
        const int k = bc.in_channels * 9;
        const T* w = weights.data() + layout.conv_weight(b).offset;
        const T* gamma = norm.data() + layout.bn_gamma(b).offset;
        T* gw = grad_weights.data() + layout.conv_weight(b).offset;
        T* gb = grad_weights.data() + layout.conv_bias(b).offset;
        T* ggamma = grad_norm.data() + layout.bn_gamma(b).offset;
        T* gbeta = grad_norm.data() + layout.bn_beta(b).offset;

        // Unpool into the argmax positions and apply the ReLU mask: d(pre).
        std::vector<T> dpre(static_cast<std::size_t>(n) * f * plane, T(0.0));
        for (int i = 0; i < n; ++i) {
            for (int ch = 0; ch < f; ++ch) {
                const auto off = static_cast<std::size_t>((static_cast<std::ptrdiff_t>(i) * f + ch) * plane);
                const auto ooff = static_cast<std::size_t>((static_cast<std::ptrdiff_t>(i) * f + ch) * oplane);
                for (int q = 0; q < oplane; ++q) {
                    const auto idx = off + static_cast<std::size_t>(bc.argmax[ooff + static_cast<std::size_t>(q)]);
                    if (value_of(bc.pre[idx]) > 0.0) {
                        dpre[idx] += d_feat[ooff + static_cast<std::size_t>(q)];
                    }
                }
            }
        }

        // Batch norm: d(pre) -> d(z).
        std::vector<T> dz(dpre.size());
        const double count = static_cast<double>(n) * plane;
        for (int ch = 0; ch < f; ++ch) {
            T sum_dxhat(0.0);
            T sum_dxhat_xhat(0.0);
            T sum_dpre(0.0);
            T sum_dpre_xhat(0.0);
            for (int i = 0; i < n; ++i) {
                const auto off = static_cast<std::size_t>((static_cast<std::ptrdiff_t>(i) * f + ch) * plane);
                for (int p = 0; p < plane; ++p) {
                    const T& g = dpre[off + static_cast<std::size_t>(p)];
                    const T& xh = bc.xhat[off + static_cast<std::size_t>(p)];
                    sum_dpre += g;
                    sum_dpre_xhat += g * xh;
                }
            }
            ggamma[ch] += sum_dpre_xhat;
            gbeta[ch] += sum_dpre;
            sum_dxhat = sum_dpre * gamma[ch];
            sum_dxhat_xhat = sum_dpre_xhat * gamma[ch];
            const T inv = bc.invstd[static_cast<std::size_t>(ch)];
            for (int i = 0; i < n; ++i) {
                const auto off = static_cast<std::size_t>((static_cast<std::ptrdiff_t>(i) * f + ch) * plane);
                for (int p = 0; p < plane; ++p) {
                    const auto idx = off + static_cast<std::size_t>(p);
                    const T dxhat = dpre[idx] * gamma[ch];
                    if (bc.batch_stats) {
                        dz[idx] = inv / count * (count * dxhat - sum_dxhat - bc.xhat[idx] * sum_dxhat_xhat);
                    } else {
                        dz[idx] = dxhat * inv;
                    }
                }
            }
        }

        // Convolution.
        col.resize(static_cast<std::size_t>(k) * plane);
        std::vector<T> d_in;
        if (b > 0) {
            d_in.assign(static_cast<std::size_t>(n) * bc.in_channels * plane, T(0.0));
            dcol.resize(col.size());
        }
        for (int i = 0; i < n; ++i) {
            const T* dzi = dz.data() + static_cast<std::ptrdiff_t>(i) * f * plane;
            detail::im2col(bc.input.data() + static_cast<std::ptrdiff_t>(i) * bc.in_channels * plane, bc.in_channels,
                           s, col.data());
            detail::gemm(false, true, f, k, plane, dzi, col.data(), gw, true);
            for (int ch = 0; ch < f; ++ch) {
                for (int p = 0; p < plane; ++p) {
                    gb[ch] += dzi[ch * plane + p];
                }
            }
            if (b > 0) {
                detail::gemm(true, false, k, plane, f, w, dzi, dcol.data(), false);
                detail::col2im_add(dcol.data(), bc.in_channels, s,
                                   d_in.data() + static_cast<std::ptrdiff_t>(i) * bc.in_channels * plane);
            }
        }
        d_feat = std::move(d_in);
    }
}

/// Mean softmax cross-entropy over rows of `logits` (n x classes). Writes the
/// gradient w.r.t. the logits into `d_logits` when it is non-empty and the
/// number of argmax hits into `correct` when non-null.
template <class T>
T softmax_cross_entropy(std::span<const T> logits, int n, int classes, std::span<const int> labels,
                        std::span<T> d_logits, int* correct = nullptr) {
    require(logits.size() == static_cast<std::size_t>(n) * classes && labels.size() == static_cast<std::size_t>(n),
            "softmax_cross_entropy: size mismatch");
    using std::exp;
    using std::log;
    T total(0.0);
    int hits = 0;
    std::vector<T> prob(static_cast<std::size_t>(classes));
    for (int i = 0; i < n; ++i) {
        const T* row = logits.data() + static_cast<std::ptrdiff_t>(i) * classes;
        const int y = labels[static_cast<std::size_t>(i)];
        require(y >= 0 && y < classes, "softmax_cross_entropy: label out of range");
        int arg = 0;
        for (int c = 1; c < classes; ++c) {
            if (value_of(row[c]) > value_of(row[arg])) {
                arg = c;
            }
        }
        hits += arg == y ? 1 : 0;
        const T mx = T(value_of(row[arg]));
        T z(0.0);
        for (int c = 0; c < classes; ++c) {
            prob[static_cast<std::size_t>(c)] = exp(row[c] - mx);
            z += prob[static_cast<std::size_t>(c)];
        }
        total += log(z) + mx - row[y];
        if (!d_logits.empty()) {
            for (int c = 0; c < classes; ++c) {
                T g = prob[static_cast<std::size_t>(c)] / z;
                if (c == y) {
                    g = g - 1.0;
                }
                d_logits[static_cast<std::size_t>(i * classes + c)] = g / static_cast<double>(n);
            }
        }
    }
    if (correct) {
        *correct = hits;
    }
    return total / static_cast<double>(n);
}

struct LossResult {
    double loss = 0.0;
    double accuracy = 0.0;
};

/// Cross-entropy of a linear-head backbone on a labeled batch; gradients are
/// accumulated when the gradient spans are non-empty.
template <class T>
T classifier_loss(const BackboneConfig& cfg, std::span<const T> weights, std::span<const T> norm,
                  const InputBatch& input, std::span<const int> labels, BnMode mode, std::span<RunningStats> bank,
                  bool update_stats, std::span<T> grad_weights, std::span<T> grad_norm, double* accuracy = nullptr) {
    require(cfg.head == HeadKind::linear, "classifier_loss: backbone needs a linear head");
    ForwardCache<T> cache;
    forward<T>(cfg, weights, norm, input, mode, bank, update_stats, cache);
    std::vector<T> d_logits;
    const bool want_grad = !grad_weights.empty();
    if (want_grad) {
        d_logits.resize(cache.output.size());
    }
    int hits = 0;
    const T loss = softmax_cross_entropy<T>(cache.output, input.n, cfg.n_out, labels, d_logits, &hits);
    if (accuracy) {
        *accuracy = static_cast<double>(hits) / input.n;
    }
    if (want_grad) {
        backward<T>(cfg, weights, norm, cache, d_logits, grad_weights, grad_norm);
    }
    return loss;
}

/// Parameter-shaped gradient record.
struct ParamGradient {
    std::vector<double> weights;
    std::vector<double> norm;
};

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Evaluates `closure(weights, norm, grad_weights, grad_norm) -> loss`, which
/// accumulates its reverse-mode gradient into the supplied buffers, and returns
/// the loss with the gradient record. Non-finite values raise NumericalError.
template <class Closure>
std::pair<double, ParamGradient> gradient(const ConvBackboneParams& params, Closure&& closure) {
    ParamGradient g{std::vector<double>(params.weights.size(), 0.0), std::vector<double>(params.norm.size(), 0.0)};
    const double loss = closure(std::span<const double>(params.weights), std::span<const double>(params.norm),
                                std::span<double>(g.weights), std::span<double>(g.norm));
    if (!std::isfinite(loss)) {
        throw NumericalError("gradient: loss is not finite (" + std::to_string(loss) + ")");
    }
    if (!all_finite(g.weights) || !all_finite(g.norm)) {
        throw NumericalError("gradient: non-finite gradient entries");
    }
    return {loss, std::move(g)};
}

/// Forward pass without gradients (double precision).
inline std::vector<double> predict(const ConvBackboneParams& params, const InputBatch& input,
                                   BnMode mode = BnMode::batch_stats()) {
    ForwardCache<double> cache;
    RunningStats stats = params.stats;
    forward<double>(params.config, params.weights, params.norm, input, mode, std::span<RunningStats>(&stats, 1),
                    false, cache);
    return std::move(cache.output);
}

}  // namespace aal
