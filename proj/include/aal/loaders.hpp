#pragma once

// Dataset readers for Omniglot and Mini-Imagenet.
//
// Omniglot layout: <root>/[images_background|images_evaluation/]<alphabet>/<character>/<instance>.png
// Every directory that directly contains .png files is one class. Classes are
// ordered lexicographically by their path relative to the root; the first
// `train_end` classes form meta-train, the next `val_end - train_end`
// meta-val and the rest meta-test. Images are read as grayscale, resized to
// 28x28 and inverted so that strokes are 1 and background is 0.
//
// Mini-Imagenet layout: <root>/{train,val,test}.csv with a `filename,label`
// header, and the images under <root>/images/. Classes inside a split are
// ordered by label name. Images are converted to RGB and resized to 84x84.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "aal/dataset.hpp"
#include "aal/error.hpp"

namespace aal {

struct SplitTriple {
    DatasetIndex train, val, test;
};

struct OmniglotLayout {
    int train_end = 1150;
    int val_end = 1200;
    int total_classes = 1623;
    int instances_per_class = 20;
    int side = 28;
};

struct MiniImagenetLayout {
    int train_classes = 64;
    int val_classes = 12;
    int test_classes = 24;
    int instances_per_class = 600;
    int side = 84;
};

namespace detail {

inline ImageTensor read_image(const std::filesystem::path& file, int side, int channels) {
    cv::Mat raw = cv::imread(file.string(), channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
    if (raw.empty()) {
        throw IntegrityError("unreadable or corrupt image: " + file.string());
    }
    if (channels == 3) {
        cv::cvtColor(raw, raw, cv::COLOR_BGR2RGB);
    }
    cv::Mat resized;
    if (raw.rows != side || raw.cols != side) {
        cv::resize(raw, resized, cv::Size(side, side), 0, 0, cv::INTER_AREA);
    } else {
        resized = raw;
    }
    ImageTensor img(side, side, channels);
    for (int y = 0; y < side; ++y) {
        const auto* row = resized.ptr<unsigned char>(y);
        for (int x = 0; x < side; ++x) {
            for (int c = 0; c < channels; ++c) {
                img.at(y, x, c) = static_cast<float>(row[x * channels + c]) / 255.0f;
            }
        }
    }
    return img;
}

inline void require_directory(const std::filesystem::path& root) {
    std::error_code ec;
    if (!std::filesystem::is_directory(root, ec)) {
        throw LoadError("dataset root is not a readable directory: " + root.string());
    }
}

inline bool has_extension(const std::filesystem::path& p, std::initializer_list<const char*> exts) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    return std::any_of(exts.begin(), exts.end(), [&](const char* e) { return ext == e; });
}

}  // namespace detail

inline SplitTriple load_omniglot(const std::filesystem::path& root, const OmniglotLayout& layout = {}) {
    namespace fs = std::filesystem;
    detail::require_directory(root);

    std::map<std::string, std::vector<fs::path>> classes;  // ordered by relative path
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (entry.is_regular_file() && detail::has_extension(entry.path(), {".png"})) {
            const auto rel = fs::relative(entry.path().parent_path(), root).generic_string();
            classes[rel].push_back(entry.path());
        }
    }
    if (classes.empty()) {
        throw LoadError("no Omniglot images found under " + root.string());
    }
    if (static_cast<int>(classes.size()) != layout.total_classes) {
        throw IntegrityError("expected " + std::to_string(layout.total_classes) + " Omniglot classes, found " +
                             std::to_string(classes.size()));
    }

    ImageList imgs[3];
    std::vector<int> labels[3];
    int index = 0;
    for (auto& [name, files] : classes) {
        if (static_cast<int>(files.size()) != layout.instances_per_class) {
            throw IntegrityError("class " + name + " has " + std::to_string(files.size()) + " instances, expected " +
                                 std::to_string(layout.instances_per_class));
        }
        std::sort(files.begin(), files.end());
        const int split = index < layout.train_end ? 0 : (index < layout.val_end ? 1 : 2);
        const int base = split == 0 ? 0 : (split == 1 ? layout.train_end : layout.val_end);
        for (const auto& f : files) {
            ImageTensor img = detail::read_image(f, layout.side, 1);
            for (auto& v : img.pixels()) {
                v = 1.0f - v;
            }
            imgs[split].push_back(std::move(img));
            labels[split].push_back(index - base);
        }
        ++index;
    }
    const int counts[3] = {layout.train_end, layout.val_end - layout.train_end, layout.total_classes - layout.val_end};
    const int bases[3] = {0, layout.train_end, layout.val_end};
    const Split splits[3] = {Split::meta_train, Split::meta_val, Split::meta_test};
    auto make = [&](int s) {
        return DatasetIndex("omniglot", splits[s], bases[s], counts[s], std::move(imgs[s]), std::move(labels[s]));
    };
    return {make(0), make(1), make(2)};
}

namespace detail {

inline DatasetIndex load_miniimagenet_split(const std::filesystem::path& root, const std::string& csv_name,
                                            Split split, int class_base, int expected_classes,
                                            const MiniImagenetLayout& layout) {
    const auto csv = root / csv_name;
    std::ifstream in(csv);
    if (!in) {
        throw LoadError("missing split listing: " + csv.string());
    }
    std::string line;
    std::getline(in, line);  // header
    std::map<std::string, std::vector<std::string>> by_label;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const auto comma = line.find(',');
        if (comma == std::string::npos) {
            throw IntegrityError("malformed row in " + csv.string() + ": " + line);
        }
        by_label[line.substr(comma + 1)].push_back(line.substr(0, comma));
    }
    if (static_cast<int>(by_label.size()) != expected_classes) {
        throw IntegrityError(csv_name + ": expected " + std::to_string(expected_classes) + " classes, found " +
                             std::to_string(by_label.size()));
    }
    ImageList imgs;
    std::vector<int> labels;
    int c = 0;
    for (const auto& [label, files] : by_label) {
        if (static_cast<int>(files.size()) != layout.instances_per_class) {
            throw IntegrityError("class " + label + " has " + std::to_string(files.size()) + " instances, expected " +
                                 std::to_string(layout.instances_per_class));
        }
        for (const auto& f : files) {
            imgs.push_back(read_image(root / "images" / f, layout.side, 3));
            labels.push_back(c);
        }
        ++c;
    }
    return DatasetIndex("miniimagenet", split, class_base, expected_classes, std::move(imgs), std::move(labels));
}

}  // namespace detail

inline SplitTriple load_miniimagenet(const std::filesystem::path& root, const MiniImagenetLayout& layout = {}) {
    detail::require_directory(root);
    return {detail::load_miniimagenet_split(root, "train.csv", Split::meta_train, 0, layout.train_classes, layout),
            detail::load_miniimagenet_split(root, "val.csv", Split::meta_val, layout.train_classes,
                                            layout.val_classes, layout),
            detail::load_miniimagenet_split(root, "test.csv", Split::meta_test,
                                            layout.train_classes + layout.val_classes, layout.test_classes, layout)};
}

}  // namespace aal
