#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "aal/error.hpp"
#include "aal/image.hpp"
#include "aal/rng.hpp"

namespace aal {

enum class Split { meta_train, meta_val, meta_test };

inline std::string to_string(Split s) {
    switch (s) {
        case Split::meta_train: return "meta-train";
        case Split::meta_val: return "meta-val";
        case Split::meta_test: return "meta-test";
    }
    return "unknown";
}

using ImageList = std::vector<ImageTensor>;

/// Labeled, class-partitioned image collection for one meta-split.
///
/// Labels are split-local class indices in [0, class_count). The global class
/// identifier (used for split-disjointness checks) is `class_base + label`.
/// Instances are immutable after construction; copies share the pixel storage.
class DatasetIndex {
public:
    DatasetIndex() = default;

    DatasetIndex(std::string name, Split split, int class_base, int class_count, ImageList images,
                 std::vector<int> labels)
        : name_(std::move(name)), split_(split), class_base_(class_base), class_count_(class_count),
          images_(std::make_shared<const ImageList>(std::move(images))),
          labels_(std::make_shared<const std::vector<int>>(std::move(labels))) {
        require(class_count_ >= 0, "DatasetIndex: negative class count");
        require(images_->size() == labels_->size(), "DatasetIndex: images and labels differ in length");
        by_class_.assign(static_cast<std::size_t>(class_count_), {});
        for (std::size_t i = 0; i < labels_->size(); ++i) {
            const int c = (*labels_)[i];
            require(c >= 0 && c < class_count_, "DatasetIndex: label out of range");
            by_class_[static_cast<std::size_t>(c)].push_back(static_cast<int>(i));
        }
        for (int c = 0; c < class_count_; ++c) {
            require(!by_class_[static_cast<std::size_t>(c)].empty(),
                    "DatasetIndex: class " + std::to_string(c) + " has no samples");
        }
    }

    const std::string& name() const { return name_; }
    Split split() const { return split_; }
    int class_base() const { return class_base_; }
    int class_count() const { return class_count_; }
    std::size_t size() const { return images_ ? images_->size() : 0; }
    bool empty() const { return size() == 0; }

    const ImageTensor& image(int i) const { return (*images_)[static_cast<std::size_t>(i)]; }
    int label(int i) const { return (*labels_)[static_cast<std::size_t>(i)]; }
    int global_class(int label) const { return class_base_ + label; }

    /// Dataset-wide indices of the instances of one class.
    const std::vector<int>& instances_of(int label) const { return by_class_[static_cast<std::size_t>(label)]; }

    std::shared_ptr<const ImageList> shared_images() const { return images_; }

    /// Instance count when every class has the same number of samples, otherwise 0.
    int samples_per_class() const {
        if (by_class_.empty()) {
            return 0;
        }
        const auto m = by_class_.front().size();
        for (const auto& c : by_class_) {
            if (c.size() != m) {
                return 0;
            }
        }
        return static_cast<int>(m);
    }

private:
    std::string name_;
    Split split_ = Split::meta_train;
    int class_base_ = 0;
    int class_count_ = 0;
    std::shared_ptr<const ImageList> images_;
    std::shared_ptr<const std::vector<int>> labels_;
    std::vector<std::vector<int>> by_class_;
};

/// Label-free image collection. There is no accessor for class information.
class UnlabeledPool {
public:
    UnlabeledPool() = default;

    explicit UnlabeledPool(std::shared_ptr<const ImageList> images) : images_(std::move(images)) {
        require(images_ && !images_->empty(), "UnlabeledPool: no images");
    }

    explicit UnlabeledPool(ImageList images)
        : UnlabeledPool(std::make_shared<const ImageList>(std::move(images))) {}

    std::size_t size() const { return images_ ? images_->size() : 0; }
    const ImageTensor& image(int i) const { return (*images_)[static_cast<std::size_t>(i)]; }

private:
    std::shared_ptr<const ImageList> images_;
};

inline UnlabeledPool strip_labels(const DatasetIndex& d) {
    if (d.empty()) {
        throw ValidationError("strip_labels: dataset is empty");
    }
    return UnlabeledPool(d.shared_images());
}

namespace detail {

struct Stroke {
    double x0, y0, x1, y1;
};

inline double segment_distance(double px, double py, const Stroke& s) {
    const double dx = s.x1 - s.x0;
    const double dy = s.y1 - s.y0;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0.0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double ex = s.x0 + t * dx - px;
    const double ey = s.y0 + t * dy - py;
    return std::sqrt(ex * ex + ey * ey);
}

}  // namespace detail

/// Deterministic single-channel dataset of stroke glyphs. Each class is a set
/// of three line segments fixed by (seed, class_base + label); each instance
/// jitters the endpoints, shifts the glyph and adds low-amplitude noise.
inline DatasetIndex make_synthetic(int n_classes, int n_per_class, int side, std::uint64_t seed,
                                   int class_base = 0, Split split = Split::meta_train) {
    if (n_classes <= 0 || n_per_class <= 0 || side <= 0) {
        throw ValidationError("make_synthetic: all size arguments must be positive");
    }
    ImageList images;
    std::vector<int> labels;
    images.reserve(static_cast<std::size_t>(n_classes) * n_per_class);
    labels.reserve(images.capacity());

    const double s = side;
    const double thickness = std::max(0.75, s / 18.0);
    const int max_shift = std::max(1, side / 14);

    for (int c = 0; c < n_classes; ++c) {
        RngStream class_rng(splitmix64(seed) ^ splitmix64(0xC1A55ULL + static_cast<std::uint64_t>(class_base + c)));
        std::vector<detail::Stroke> glyph(3);
        for (auto& st : glyph) {
            st = {class_rng.uniform(0.15, 0.85) * s, class_rng.uniform(0.15, 0.85) * s,
                  class_rng.uniform(0.15, 0.85) * s, class_rng.uniform(0.15, 0.85) * s};
        }
        for (int k = 0; k < n_per_class; ++k) {
            RngStream rng = class_rng.substream(static_cast<std::uint64_t>(k));
            const double jitter = 0.03 * s;
            const auto sx = static_cast<double>(rng.uniform_int(-max_shift, max_shift));
            const auto sy = static_cast<double>(rng.uniform_int(-max_shift, max_shift));
            std::vector<detail::Stroke> inst = glyph;
            for (auto& st : inst) {
                st.x0 += sx + jitter * rng.normal();
                st.y0 += sy + jitter * rng.normal();
                st.x1 += sx + jitter * rng.normal();
                st.y1 += sy + jitter * rng.normal();
            }
            ImageTensor img(side, side, 1);
            for (int y = 0; y < side; ++y) {
                for (int x = 0; x < side; ++x) {
                    double v = 0.0;
                    for (const auto& st : inst) {
                        if (detail::segment_distance(x + 0.5, y + 0.5, st) <= thickness) {
                            v = 1.0;
                            break;
                        }
                    }
                    v = v > 0.0 ? v - 0.1 * rng.uniform() : 0.1 * rng.uniform();
                    img.at(y, x, 0) = static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
            }
            images.push_back(std::move(img));
            labels.push_back(c);
        }
    }
    return DatasetIndex("synthetic", split, class_base, n_classes, std::move(images), std::move(labels));
}

/// Three class-disjoint synthetic splits sharing one seed.
struct SyntheticSplits {
    DatasetIndex train, val, test;
};

inline SyntheticSplits make_synthetic_splits(int train_classes, int val_classes, int test_classes,
                                             int n_per_class, int side, std::uint64_t seed) {
    return {make_synthetic(train_classes, n_per_class, side, seed, 0, Split::meta_train),
            make_synthetic(val_classes, n_per_class, side, seed, train_classes, Split::meta_val),
            make_synthetic(test_classes, n_per_class, side, seed, train_classes + val_classes, Split::meta_test)};
}

}  // namespace aal
