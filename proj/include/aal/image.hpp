#pragma once

#include <algorithm>
#include <cstddef>
#include <utility>
#include <vector>

#include "aal/error.hpp"

namespace aal {

/// Channels-last image with pixel values in [0, 1].
class ImageTensor {
public:
    ImageTensor() = default;

    ImageTensor(int height, int width, int channels, float fill = 0.0f)
        : height_(height), width_(width), channels_(channels),
          pixels_(static_cast<std::size_t>(height) * width * channels, fill) {
        require(height > 0 && width > 0 && channels > 0, "ImageTensor: dimensions must be positive");
    }

    ImageTensor(int height, int width, int channels, std::vector<float> pixels)
        : height_(height), width_(width), channels_(channels), pixels_(std::move(pixels)) {
        require(height > 0 && width > 0 && channels > 0, "ImageTensor: dimensions must be positive");
        require(pixels_.size() == static_cast<std::size_t>(height) * width * channels,
                "ImageTensor: pixel buffer does not match shape");
    }

    int height() const { return height_; }
    int width() const { return width_; }
    int channels() const { return channels_; }
    std::size_t size() const { return pixels_.size(); }
    bool empty() const { return pixels_.empty(); }

    float& at(int y, int x, int c) { return pixels_[index(y, x, c)]; }
    float at(int y, int x, int c) const { return pixels_[index(y, x, c)]; }

    const std::vector<float>& pixels() const { return pixels_; }
    std::vector<float>& pixels() { return pixels_; }

    bool same_shape(const ImageTensor& other) const {
        return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
    }

    bool in_unit_range() const {
        return std::all_of(pixels_.begin(), pixels_.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
    }

    friend bool operator==(const ImageTensor&, const ImageTensor&) = default;

private:
    std::size_t index(int y, int x, int c) const {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }

    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<float> pixels_;
};

}  // namespace aal
