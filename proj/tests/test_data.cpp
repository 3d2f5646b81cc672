#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include <opencv2/imgcodecs.hpp>

#include "aal/loaders.hpp"

using namespace aal;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::path(AAL_TEST_TMP) / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_png(const fs::path& file, int side, int channels, int value) {
    fs::create_directories(file.parent_path());
    cv::Mat m(side, side, channels == 1 ? CV_8UC1 : CV_8UC3, cv::Scalar::all(value));
    cv::imwrite(file.string(), m);
}

// alphabet/character/instance tree
fs::path fake_omniglot(const std::string& name, int classes, int per_class) {
    const auto root = fresh_dir(name);
    for (int c = 0; c < classes; ++c) {
        const auto dir = root / ("alpha" + std::to_string(c / 3)) / ("char" + std::to_string(c % 3));
        for (int i = 0; i < per_class; ++i) {
            write_png(dir / (std::to_string(i) + ".png"), 35, 1, 255 - 10 * c);
        }
    }
    return root;
}

OmniglotLayout small_omniglot() { return {3, 4, 6, 4, 28}; }

fs::path fake_mini(const std::string& name, const MiniImagenetLayout& layout) {
    const auto root = fresh_dir(name);
    int c = 0;
    for (const auto& [csv, count] : {std::pair{"train.csv", layout.train_classes}, std::pair{"val.csv", layout.val_classes},
                                     std::pair{"test.csv", layout.test_classes}}) {
        std::ofstream out(root / csv);
        out << "filename,label\n";
        for (int k = 0; k < count; ++k, ++c) {
            for (int i = 0; i < layout.instances_per_class; ++i) {
                const std::string file = "n" + std::to_string(c) + "_" + std::to_string(i) + ".jpg";
                write_png(root / "images" / file, 100, 3, 20 * c);
                out << file << ",n" << (1000 + c) << "\n";
            }
        }
    }
    return root;
}

MiniImagenetLayout small_mini() { return {3, 2, 2, 3, 84}; }

std::set<int> global_classes(const DatasetIndex& d) {
    std::set<int> out;
    for (int c = 0; c < d.class_count(); ++c) {
        out.insert(d.global_class(c));
    }
    return out;
}

bool disjoint(const std::set<int>& a, const std::set<int>& b) {
    return std::none_of(a.begin(), a.end(), [&](int x) { return b.count(x) > 0; });
}

}  // namespace

TEST_CASE("synthetic datasets are deterministic and sized as requested") {
    const auto a = make_synthetic(5, 20, 28, 0);
    const auto b = make_synthetic(5, 20, 28, 0);
    REQUIRE(a.size() == 100);
    CHECK(a.class_count() == 5);
    CHECK(a.samples_per_class() == 20);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.image(i) == b.image(i));
        CHECK(a.label(i) == b.label(i));
        CHECK(a.image(i).in_unit_range());
        CHECK(a.image(i).height() == 28);
    }
    const auto c = make_synthetic(5, 20, 28, 1);
    CHECK_FALSE(a.image(0) == c.image(0));
}

TEST_CASE("synthetic arguments must be positive") {
    CHECK_THROWS_AS(make_synthetic(0, 20, 28, 0), ValidationError);
    CHECK_THROWS_AS(make_synthetic(5, 0, 28, 0), ValidationError);
    CHECK_THROWS_AS(make_synthetic(5, 20, -1, 0), ValidationError);
}

TEST_CASE("synthetic splits are class-disjoint") {
    const auto s = make_synthetic_splits(6, 3, 4, 5, 16, 9);
    CHECK(s.train.class_count() == 6);
    CHECK(s.val.class_count() == 3);
    CHECK(s.test.class_count() == 4);
    CHECK(s.val.split() == Split::meta_val);
    CHECK(disjoint(global_classes(s.train), global_classes(s.val)));
    CHECK(disjoint(global_classes(s.train), global_classes(s.test)));
    CHECK(disjoint(global_classes(s.val), global_classes(s.test)));
}

TEST_CASE("synthetic classes are closer to themselves than to other classes") {
    const auto d = make_synthetic(4, 6, 28, 3);
    auto dist = [&](int i, int j) {
        double s = 0.0;
        const auto a = d.image(i).pixels();
        const auto b = d.image(j).pixels();
        for (std::size_t k = 0; k < a.size(); ++k) {
            s += (a[k] - b[k]) * (a[k] - b[k]);
        }
        return s;
    };
    double within = 0.0;
    double across = 0.0;
    int nw = 0;
    int na = 0;
    for (int i = 0; i < 24; ++i) {
        for (int j = i + 1; j < 24; ++j) {
            if (d.label(i) == d.label(j)) {
                within += dist(i, j);
                ++nw;
            } else {
                across += dist(i, j);
                ++na;
            }
        }
    }
    CHECK(within / nw < across / na);
}

TEST_CASE("strip_labels keeps every image") {
    const auto d = make_synthetic(3, 4, 8, 0);
    const auto pool = strip_labels(d);
    CHECK(pool.size() == 12);
    CHECK(pool.image(5) == d.image(5));
    const DatasetIndex one("one", Split::meta_train, 0, 1, {ImageTensor(2, 2, 1)}, {0});
    CHECK(strip_labels(one).size() == 1);
    CHECK_THROWS_AS(strip_labels(DatasetIndex{}), ValidationError);
}

TEST_CASE("Omniglot-shaped meta-train split gives a pool of 23000") {
    const auto d = make_synthetic(1150, 20, 4, 0);
    CHECK(strip_labels(d).size() == 23000);
}

TEST_CASE("dataset index rejects inconsistent input") {
    CHECK_THROWS_AS(DatasetIndex("x", Split::meta_train, 0, 2, {ImageTensor(2, 2, 1)}, {0}), ValidationError);
    CHECK_THROWS_AS(DatasetIndex("x", Split::meta_train, 0, 1, {ImageTensor(2, 2, 1)}, {1}), ValidationError);
    CHECK_THROWS_AS(DatasetIndex("x", Split::meta_train, 0, 1, {ImageTensor(2, 2, 1)}, {}), ValidationError);
}

TEST_CASE("Omniglot loader splits classes in path order") {
    const auto root = fake_omniglot("omni_ok", 6, 4);
    const auto s = load_omniglot(root, small_omniglot());
    CHECK(s.train.class_count() == 3);
    CHECK(s.val.class_count() == 1);
    CHECK(s.test.class_count() == 2);
    CHECK(s.train.samples_per_class() == 4);
    CHECK(s.test.class_base() == 4);
    CHECK(disjoint(global_classes(s.train), global_classes(s.test)));
    const auto& img = s.train.image(0);
    CHECK(img.height() == 28);
    CHECK(img.channels() == 1);
    CHECK(img.in_unit_range());
    // Class 0 is written at 255 (white background), so it loads inverted as 0.
    CHECK(img.at(3, 3, 0) == 0.0f);

    const auto again = load_omniglot(root, small_omniglot());
    for (std::size_t i = 0; i < s.train.size(); ++i) {
        CHECK(again.train.image(static_cast<int>(i)) == s.train.image(static_cast<int>(i)));
    }
}

TEST_CASE("Omniglot loader reports missing, empty and inconsistent trees") {
    CHECK_THROWS_AS(load_omniglot(fs::path(AAL_TEST_TMP) / "does_not_exist"), LoadError);
    CHECK_THROWS_AS(load_omniglot(fresh_dir("omni_empty")), LoadError);
    CHECK_THROWS_AS(load_omniglot(fake_omniglot("omni_count", 5, 4), small_omniglot()), IntegrityError);

    const auto root = fake_omniglot("omni_short", 6, 4);
    fs::remove(root / "alpha1" / "char0" / "2.png");
    try {
        load_omniglot(root, small_omniglot());
        FAIL("expected IntegrityError");
    } catch (const IntegrityError& e) {
        CHECK(std::string(e.what()).find("alpha1/char0") != std::string::npos);
    }
}

TEST_CASE("corrupt image files are named in the error") {
    const auto root = fake_omniglot("omni_corrupt", 6, 4);
    std::ofstream(root / "alpha0" / "char1" / "1.png") << "not a png";
    try {
        load_omniglot(root, small_omniglot());
        FAIL("expected IntegrityError");
    } catch (const IntegrityError& e) {
        CHECK(std::string(e.what()).find("char1/1.png") != std::string::npos);
    }
}

TEST_CASE("Mini-Imagenet loader reads split listings") {
    const auto layout = small_mini();
    const auto root = fake_mini("mini_ok", layout);
    const auto s = load_miniimagenet(root, layout);
    CHECK(s.train.class_count() == 3);
    CHECK(s.val.class_count() == 2);
    CHECK(s.test.class_count() == 2);
    CHECK(s.val.class_base() == 3);
    CHECK(s.test.samples_per_class() == 3);
    const auto& img = s.test.image(0);
    CHECK(img.height() == 84);
    CHECK(img.channels() == 3);
    CHECK(img.in_unit_range());

    std::ofstream(root / "images" / "n4_0.jpg") << "garbage";
    try {
        load_miniimagenet(root, layout);
        FAIL("expected IntegrityError");
    } catch (const IntegrityError& e) {
        CHECK(std::string(e.what()).find("n4_0.jpg") != std::string::npos);
    }
    fs::remove(root / "val.csv");
    CHECK_THROWS_AS(load_miniimagenet(root, layout), LoadError);
}
