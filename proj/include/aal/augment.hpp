#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <sstream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "aal/error.hpp"
#include "aal/image.hpp"
#include "aal/rng.hpp"

namespace aal {

enum class FlipAxis { horizontal, vertical };
enum class Interpolation { bilinear, nearest };

namespace detail {

inline void require_probability(double p, const char* op) {
    require(p >= 0.0 && p <= 1.0, std::string(op) + ": probability must lie in [0, 1]");
}

// Zero outside the image.
inline float sample_bilinear(const ImageTensor& img, double sy, double sx, int c) {
    const int y0 = static_cast<int>(std::floor(sy));
    const int x0 = static_cast<int>(std::floor(sx));
    const double fy = sy - y0;
    const double fx = sx - x0;
    auto px = [&](int y, int x) -> double {
        if (y < 0 || x < 0 || y >= img.height() || x >= img.width()) {
            return 0.0;
        }
        return img.at(y, x, c);
    };
    const double top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1) * fx;
    const double bottom = px(y0 + 1, x0) * (1.0 - fx) + px(y0 + 1, x0 + 1) * fx;
    return static_cast<float>(std::clamp(top * (1.0 - fy) + bottom * fy, 0.0, 1.0));
}

inline float sample_nearest(const ImageTensor& img, double sy, double sx, int c) {
    const auto y = static_cast<int>(std::lround(sy));
    const auto x = static_cast<int>(std::lround(sx));
    if (y < 0 || x < 0 || y >= img.height() || x >= img.width()) {
        return 0.0f;
    }
    return img.at(y, x, c);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Individual operators
// ---------------------------------------------------------------------------

/// Window of the zero-padded image at offset (oy, ox), both in [0, 2 * padding].
inline ImageTensor crop_at(const ImageTensor& img, int padding, int oy, int ox) {
    ImageTensor out(img.height(), img.width(), img.channels());
    for (int y = 0; y < img.height(); ++y) {
        const int sy = y + oy - padding;
        if (sy < 0 || sy >= img.height()) {
            continue;
        }
        for (int x = 0; x < img.width(); ++x) {
            const int sx = x + ox - padding;
            if (sx < 0 || sx >= img.width()) {
                continue;
            }
            for (int c = 0; c < img.channels(); ++c) {
                out.at(y, x, c) = img.at(sy, sx, c);
            }
        }
    }
    return out;
}

inline ImageTensor random_crop(const ImageTensor& img, int padding, RngStream& rng) {
    require(padding >= 0, "random_crop: padding must be non-negative");
    require(padding < std::min(img.height(), img.width()), "random_crop: padding must be smaller than the image side");
    const auto oy = static_cast<int>(rng.uniform_int(0, 2 * padding));
    const auto ox = static_cast<int>(rng.uniform_int(0, 2 * padding));
    return crop_at(img, padding, oy, ox);
}

inline ImageTensor flip(const ImageTensor& img, FlipAxis axis) {
    ImageTensor out(img.height(), img.width(), img.channels());
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            const int sy = axis == FlipAxis::vertical ? img.height() - 1 - y : y;
            const int sx = axis == FlipAxis::horizontal ? img.width() - 1 - x : x;
            for (int c = 0; c < img.channels(); ++c) {
                out.at(y, x, c) = img.at(sy, sx, c);
            }
        }
    }
    return out;
}

inline ImageTensor random_flip(const ImageTensor& img, FlipAxis axis, double p, RngStream& rng) {
    detail::require_probability(p, "random_flip");
    return rng.bernoulli(p) ? flip(img, axis) : img;
}

/// Rotation about the image center by `degrees` (counter-clockwise); uncovered pixels are zero.
inline ImageTensor rotate(const ImageTensor& img, double degrees, Interpolation interp = Interpolation::bilinear) {
    const double rad = degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(rad);
    const double sn = std::sin(rad);
    const double cy = (img.height() - 1) / 2.0;
    const double cx = (img.width() - 1) / 2.0;
    ImageTensor out(img.height(), img.width(), img.channels());
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            const double dx = x - cx;
            const double dy = y - cy;
            // Inverse mapping into the source image.
            const double sx = cs * dx - sn * dy + cx;
            const double sy = sn * dx + cs * dy + cy;
            for (int c = 0; c < img.channels(); ++c) {
                out.at(y, x, c) = interp == Interpolation::bilinear ? detail::sample_bilinear(img, sy, sx, c)
                                                                    : detail::sample_nearest(img, sy, sx, c);
            }
        }
    }
    return out;
}

inline ImageTensor random_rotation(const ImageTensor& img, double degrees_lo, double degrees_hi, RngStream& rng,
                                   Interpolation interp = Interpolation::bilinear) {
    require(degrees_lo > 0.0 && degrees_lo <= degrees_hi && degrees_hi < 360.0,
            "random_rotation: need 0 < lo <= hi < 360");
    return rotate(img, rng.uniform(degrees_lo, degrees_hi), interp);
}

/// Zeroes each spatial position (all channels together) with probability p.
inline ImageTensor pixel_dropout(const ImageTensor& img, double p, RngStream& rng) {
    detail::require_probability(p, "pixel_dropout");
    ImageTensor out = img;
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            if (rng.bernoulli(p)) {
                for (int c = 0; c < img.channels(); ++c) {
                    out.at(y, x, c) = 0.0f;
                }
            }
        }
    }
    return out;
}

struct SquareRegion {
    int y0, x0, y1, x1;  // half-open, already clipped to the image

    bool contains(int y, int x) const { return y >= y0 && y < y1 && x >= x0 && x < x1; }
};

/// Square of side `side` centred on (cy, cx), clipped at the borders.
inline SquareRegion centered_square(const ImageTensor& img, int cy, int cx, int side) {
    const int y0 = cy - side / 2;
    const int x0 = cx - side / 2;
    return {std::max(0, y0), std::max(0, x0), std::min(img.height(), y0 + side), std::min(img.width(), x0 + side)};
}

inline void erase(ImageTensor& img, const SquareRegion& r) {
    for (int y = r.y0; y < r.y1; ++y) {
        for (int x = r.x0; x < r.x1; ++x) {
            for (int c = 0; c < img.channels(); ++c) {
                img.at(y, x, c) = 0.0f;
            }
        }
    }
}

inline ImageTensor cutout(const ImageTensor& img, int holes, int side_lo, int side_hi, RngStream& rng,
                          std::vector<SquareRegion>* drawn = nullptr) {
    require(holes >= 1, "cutout: need at least one hole");
    require(side_lo > 0 && side_lo <= side_hi && side_hi <= std::min(img.height(), img.width()),
            "cutout: need 0 < side_lo <= side_hi <= image side");
    ImageTensor out = img;
    for (int h = 0; h < holes; ++h) {
        const auto side = static_cast<int>(rng.uniform_int(side_lo, side_hi));
        const auto cy = static_cast<int>(rng.uniform_int(0, img.height() - 1));
        const auto cx = static_cast<int>(rng.uniform_int(0, img.width() - 1));
        const auto r = centered_square(img, cy, cx, side);
        erase(out, r);
        if (drawn) {
            drawn->push_back(r);
        }
    }
    return out;
}

/// Smooth elastic deformation restricted to a random rectangle.
///
/// The rectangle is (base + U{0..jitter}) on each side. Inside it a 3x3 grid
/// of random control displacements in [-1, 1] is bilinearly interpolated,
/// windowed by sin(pi u) sin(pi v) so the field vanishes on the rectangle
/// border, and scaled by `magnitude` times the rectangle side. Pixels outside
/// the rectangle are copied unchanged.
inline ImageTensor warp(const ImageTensor& img, int region_base, int region_jitter, RngStream& rng,
                        double magnitude = 0.1, SquareRegion* drawn = nullptr) {
    require(region_base > 0 && region_jitter >= 0, "warp: region size must be positive");
    require(region_base + region_jitter <= std::min(img.height(), img.width()), "warp: region larger than image");
    require(magnitude >= 0.0, "warp: magnitude must be non-negative");
    const auto rh = static_cast<int>(region_base + rng.uniform_int(0, region_jitter));
    const auto rw = static_cast<int>(region_base + rng.uniform_int(0, region_jitter));
    const auto y0 = static_cast<int>(rng.uniform_int(0, img.height() - rh));
    const auto x0 = static_cast<int>(rng.uniform_int(0, img.width() - rw));
    double ctrl[2][3][3];
    for (auto& plane : ctrl) {
        for (auto& row : plane) {
            for (auto& v : row) {
                v = rng.uniform(-1.0, 1.0);
            }
        }
    }
    if (drawn) {
        *drawn = {y0, x0, y0 + rh, x0 + rw};
    }

    auto field = [&](int plane, double u, double v) {
        // u, v in [0, 1]; control points at 0, 0.5, 1.
        const double gu = std::min(u * 2.0, 1.999999);
        const double gv = std::min(v * 2.0, 1.999999);
        const int iu = static_cast<int>(gu);
        const int iv = static_cast<int>(gv);
        const double fu = gu - iu;
        const double fv = gv - iv;
        const auto& g = ctrl[plane];
        return (g[iv][iu] * (1 - fu) + g[iv][iu + 1] * fu) * (1 - fv) +
               (g[iv + 1][iu] * (1 - fu) + g[iv + 1][iu + 1] * fu) * fv;
    };

    ImageTensor out = img;
    const double amp_y = magnitude * rh;
    const double amp_x = magnitude * rw;
    for (int y = y0; y < y0 + rh; ++y) {
        const double v = rh > 1 ? static_cast<double>(y - y0) / (rh - 1) : 0.0;
        for (int x = x0; x < x0 + rw; ++x) {
            const double u = rw > 1 ? static_cast<double>(x - x0) / (rw - 1) : 0.0;
            const double window = std::sin(std::numbers::pi * u) * std::sin(std::numbers::pi * v);
            const double sy = y + amp_y * window * field(0, u, v);
            const double sx = x + amp_x * window * field(1, u, v);
            for (int c = 0; c < img.channels(); ++c) {
                out.at(y, x, c) = detail::sample_bilinear(img, sy, sx, c);
            }
        }
    }
    return out;
}

inline ImageTensor grayscale(const ImageTensor& img) {
    require(img.channels() == 3, "grayscale: requires a 3-channel image");
    ImageTensor out(img.height(), img.width(), 3);
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            const double lum = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
            const auto v = static_cast<float>(std::clamp(lum, 0.0, 1.0));
            out.at(y, x, 0) = v;
            out.at(y, x, 1) = v;
            out.at(y, x, 2) = v;
        }
    }
    return out;
}

inline ImageTensor random_grayscale(const ImageTensor& img, double p, RngStream& rng) {
    detail::require_probability(p, "random_grayscale");
    require(img.channels() == 3, "random_grayscale: requires a 3-channel image");
    return rng.bernoulli(p) ? grayscale(img) : img;
}

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

namespace op {

struct Crop {
    int padding = 0;
};
struct HFlip {
    double p = 0.5;
};
struct VFlip {
    double p = 0.5;
};
struct Rotate {
    double degrees_lo = 1.0;
    double degrees_hi = 30.0;
};
struct Warp {
    int region_base = 14;
    int region_jitter = 6;
    double magnitude = 0.1;
};
struct Dropout {
    double p = 0.3;
};
struct Cutout {
    int holes = 5;
    int side_lo = 4;
    int side_hi = 14;
};
struct Grayscale {
    double p = 0.5;
};

}  // namespace op

/// Alternative order is the canonical application order.
using AugmentationOp = std::variant<op::Crop, op::HFlip, op::VFlip, op::Rotate, op::Warp, op::Dropout, op::Cutout,
                                    op::Grayscale>;

inline const char* token_of(const AugmentationOp& o) {
    static constexpr const char* tokens[] = {"C", "H", "V", "R", "W", "DROP", "CUT", "G"};
    return tokens[o.index()];
}

inline void validate(const AugmentationOp& o) {
    std::visit(
        [](const auto& p) {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, op::Crop>) {
                require(p.padding >= 0, "crop: padding must be non-negative");
            } else if constexpr (std::is_same_v<T, op::HFlip> || std::is_same_v<T, op::VFlip> ||
                                 std::is_same_v<T, op::Dropout> || std::is_same_v<T, op::Grayscale>) {
                detail::require_probability(p.p, token_of(AugmentationOp{p}));
            } else if constexpr (std::is_same_v<T, op::Rotate>) {
                require(p.degrees_lo > 0.0 && p.degrees_lo <= p.degrees_hi && p.degrees_hi < 360.0,
                        "rotate: need 0 < lo <= hi < 360");
            } else if constexpr (std::is_same_v<T, op::Warp>) {
                require(p.region_base > 0 && p.region_jitter >= 0 && p.magnitude >= 0.0, "warp: invalid parameters");
            } else if constexpr (std::is_same_v<T, op::Cutout>) {
                require(p.holes >= 1 && p.side_lo > 0 && p.side_lo <= p.side_hi, "cutout: invalid parameters");
            }
        },
        o);
}

class AugmentationPolicy {
public:
    AugmentationPolicy() = default;

    explicit AugmentationPolicy(std::vector<AugmentationOp> ops) : ops_(std::move(ops)) {
        std::stable_sort(ops_.begin(), ops_.end(),
                         [](const AugmentationOp& a, const AugmentationOp& b) { return a.index() < b.index(); });
        for (std::size_t i = 0; i < ops_.size(); ++i) {
            validate(ops_[i]);
            if (i > 0 && ops_[i].index() == ops_[i - 1].index()) {
                throw ValidationError(std::string("policy: duplicate operator ") + token_of(ops_[i]));
            }
        }
    }

    const std::vector<AugmentationOp>& ops() const { return ops_; }
    bool empty() const { return ops_.empty(); }

    template <class Op>
    bool has() const {
        return std::any_of(ops_.begin(), ops_.end(), [](const auto& o) { return std::holds_alternative<Op>(o); });
    }

    /// Letter tokens first (C H V R W G), then "+DROP", then "+CUT"; "none" when empty.
    std::string name() const {
        if (ops_.empty()) {
            return "none";
        }
        std::string letters;
        std::string suffix;
        for (const auto& o : ops_) {
            if (std::holds_alternative<op::Grayscale>(o)) {
                continue;
            }
            const std::string t = token_of(o);
            if (t.size() == 1) {
                letters += t;
            }
        }
        if (has<op::Grayscale>()) {
            letters += "G";
        }
        if (has<op::Dropout>()) {
            suffix += "+DROP";
        }
        if (has<op::Cutout>()) {
            suffix += "+CUT";
        }
        if (letters.empty() && !suffix.empty()) {
            suffix.erase(0, 1);
        }
        return letters + suffix;
    }

    /// One line per operator with resolved hyperparameters.
    std::string describe() const {
        std::ostringstream os;
        os << "policy " << name() << "\n";
        for (const auto& o : ops_) {
            std::visit(
                [&os](const auto& p) {
                    using T = std::decay_t<decltype(p)>;
                    if constexpr (std::is_same_v<T, op::Crop>) {
                        os << "  C     random crop, padding " << p.padding << " px\n";
                    } else if constexpr (std::is_same_v<T, op::HFlip>) {
                        os << "  H     horizontal flip, p=" << p.p << "\n";
                    } else if constexpr (std::is_same_v<T, op::VFlip>) {
                        os << "  V     vertical flip, p=" << p.p << "\n";
                    } else if constexpr (std::is_same_v<T, op::Rotate>) {
                        os << "  R     rotation, " << p.degrees_lo << "-" << p.degrees_hi << " degrees\n";
                    } else if constexpr (std::is_same_v<T, op::Warp>) {
                        os << "  W     warp, region " << p.region_base << "+U(0," << p.region_jitter << ") x "
                           << p.region_base << "+U(0," << p.region_jitter << "), magnitude " << p.magnitude << "\n";
                    } else if constexpr (std::is_same_v<T, op::Dropout>) {
                        os << "  DROP  pixel dropout, p=" << p.p << "\n";
                    } else if constexpr (std::is_same_v<T, op::Cutout>) {
                        os << "  CUT   cutout, holes " << p.holes << ", side " << p.side_lo << "-" << p.side_hi
                           << " px\n";
                    } else if constexpr (std::is_same_v<T, op::Grayscale>) {
                        os << "  G     grayscale, p=" << p.p << "\n";
                    }
                },
                o);
        }
        return os.str();
    }

private:
    std::vector<AugmentationOp> ops_;
};

inline ImageTensor apply_op(const ImageTensor& img, const AugmentationOp& o, RngStream& rng) {
    return std::visit(
        [&](const auto& p) -> ImageTensor {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, op::Crop>) {
                return random_crop(img, p.padding, rng);
            } else if constexpr (std::is_same_v<T, op::HFlip>) {
                return random_flip(img, FlipAxis::horizontal, p.p, rng);
            } else if constexpr (std::is_same_v<T, op::VFlip>) {
                return random_flip(img, FlipAxis::vertical, p.p, rng);
            } else if constexpr (std::is_same_v<T, op::Rotate>) {
                return random_rotation(img, p.degrees_lo, p.degrees_hi, rng);
            } else if constexpr (std::is_same_v<T, op::Warp>) {
                return warp(img, p.region_base, p.region_jitter, rng, p.magnitude);
            } else if constexpr (std::is_same_v<T, op::Dropout>) {
                return pixel_dropout(img, p.p, rng);
            } else if constexpr (std::is_same_v<T, op::Cutout>) {
                return cutout(img, p.holes, p.side_lo, p.side_hi, rng);
            } else {
                return random_grayscale(img, p.p, rng);
            }
        },
        o);
}

/// Applies the policy's operators in canonical order C, H, V, R, W, DROP, CUT, G.
inline ImageTensor apply_policy(const ImageTensor& img, const AugmentationPolicy& policy, RngStream& rng) {
    ImageTensor out = img;
    for (const auto& o : policy.ops()) {
        out = apply_op(out, o, rng);
    }
    return out;
}

enum class DatasetKind { omniglot, miniimagenet, synthetic };

inline std::string to_string(DatasetKind d) {
    switch (d) {
        case DatasetKind::omniglot: return "omniglot";
        case DatasetKind::miniimagenet: return "miniimagenet";
        case DatasetKind::synthetic: return "synthetic";
    }
    return "unknown";
}

inline DatasetKind dataset_from_string(const std::string& s) {
    if (s == "omniglot") {
        return DatasetKind::omniglot;
    }
    if (s == "miniimagenet") {
        return DatasetKind::miniimagenet;
    }
    if (s == "synthetic") {
        return DatasetKind::synthetic;
    }
    throw ParseError("unknown dataset '" + s + "'");
}

/// Operator with its per-dataset hyperparameters. Synthetic data reuses the
/// Omniglot settings scaled by side / 28.
inline AugmentationOp table_op(const std::string& token, DatasetKind dataset, int synthetic_side = 28) {
    const bool mini = dataset == DatasetKind::miniimagenet;
    const double scale = dataset == DatasetKind::synthetic ? synthetic_side / 28.0 : 1.0;
    auto px = [scale](int v) { return std::max(1, static_cast<int>(std::lround(v * scale))); };
    if (token == "C") {
        return op::Crop{mini ? 21 : px(7)};
    }
    if (token == "H") {
        return op::HFlip{0.5};
    }
    if (token == "V") {
        return op::VFlip{0.5};
    }
    if (token == "R") {
        return mini ? op::Rotate{1.0, 270.0} : op::Rotate{1.0, 30.0};
    }
    if (token == "W") {
        return mini ? op::Warp{42, 41, 0.1} : op::Warp{px(14), px(6), 0.1};
    }
    if (token == "DROP") {
        return op::Dropout{mini ? 0.7 : 0.3};
    }
    if (token == "CUT") {
        return mini ? op::Cutout{5, 11, 42} : op::Cutout{5, px(4), px(14)};
    }
    if (token == "G") {
        if (!mini) {
            throw ValidationError("grayscale (G) is not used for " + to_string(dataset));
        }
        return op::Grayscale{0.5};
    }
    throw ParseError("unknown augmentation token '" + token + "'");
}

/// Parses names such as "CHV", "CHVW", "CHV+DROP+CUT" or "CHVR + CUT + DROP".
inline AugmentationPolicy policy_from_name(const std::string& name, DatasetKind dataset, int synthetic_side = 28) {
    std::string compact;
    for (const char ch : name) {
        if (!std::isspace(static_cast<unsigned char>(ch))) {
            compact += static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
        }
    }
    std::vector<AugmentationOp> ops;
    if (compact.empty() || compact == "NONE") {
        return AugmentationPolicy{};
    }
    std::vector<std::string> tokens;
    std::size_t start = 0;
    while (start <= compact.size()) {
        const auto plus = compact.find('+', start);
        const auto part = compact.substr(start, plus == std::string::npos ? std::string::npos : plus - start);
        if (part.empty()) {
            throw ParseError("empty token in policy name '" + name + "'");
        }
        if (part == "DROP" || part == "CUT") {
            tokens.push_back(part);
        } else {
            for (const char ch : part) {
                if (std::string("CHVRWG").find(ch) == std::string::npos) {
                    throw ParseError("unknown augmentation token '" + part + "' in policy name '" + name + "'");
                }
                tokens.emplace_back(1, ch);
            }
        }
        if (plus == std::string::npos) {
            break;
        }
        start = plus + 1;
    }
    for (const auto& t : tokens) {
        ops.push_back(table_op(t, dataset, synthetic_side));
    }
    try {
        return AugmentationPolicy(std::move(ops));
    } catch (const ValidationError& e) {
        throw ParseError(std::string(e.what()) + " in policy name '" + name + "'");
    }
}

}  // namespace aal
