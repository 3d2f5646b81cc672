#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "aal/augment.hpp"
#include "test_util.hpp"

using namespace aal;
using aal::testing::random_images;

namespace {

ImageTensor random_image(int side, int channels, std::uint64_t seed) {
    RngStream rng(seed);
    return random_images(1, side, channels, rng).front();
}

ImageTensor ramp(int side) {
    ImageTensor img(side, side, 1);
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            img.at(y, x, 0) = static_cast<float>(y * side + x + 1) / static_cast<float>(side * side);
        }
    }
    return img;
}

// n * p +- 3 sigma
bool within_3_sigma(int hits, int n, double p) {
    const double sigma = std::sqrt(n * p * (1.0 - p));
    return std::abs(hits - n * p) <= 3.0 * sigma;
}

}  // namespace

TEST_CASE("crop keeps the shape and padding 0 is the identity") {
    const auto img = random_image(28, 1, 1);
    RngStream rng(2);
    const auto out = random_crop(img, 7, rng);
    CHECK(out.same_shape(img));
    CHECK(random_crop(img, 0, rng) == img);
    CHECK_THROWS_AS(random_crop(img, 28, rng), ValidationError);
    CHECK_THROWS_AS(random_crop(img, -1, rng), ValidationError);
}

TEST_CASE("crop windows match the zero-padded geometry") {
    const auto img = ramp(6);
    // Offset (0, 0) is the top-left of the padded canvas: the image shifts down-right by the padding.
    const auto tl = crop_at(img, 2, 0, 0);
    CHECK(tl.at(0, 0, 0) == 0.0f);
    CHECK(tl.at(2, 2, 0) == img.at(0, 0, 0));
    CHECK(crop_at(img, 2, 2, 2) == img);
    const auto br = crop_at(img, 2, 4, 4);
    CHECK(br.at(0, 0, 0) == img.at(2, 2, 0));
    CHECK(br.at(5, 5, 0) == 0.0f);
}

TEST_CASE("84-pixel crops with padding 21 cover offsets [0, 42] uniformly") {
    // Identify the drawn offset by locating a single marked pixel.
    ImageTensor img(84, 84, 1, 0.0f);
    img.at(42, 42, 0) = 1.0f;
    RngStream rng(5);
    std::set<int> ys;
    std::set<int> xs;
    for (int t = 0; t < 4000; ++t) {
        const auto out = random_crop(img, 21, rng);
        int found = 0;
        for (int y = 0; y < 84; ++y) {
            for (int x = 0; x < 84; ++x) {
                if (out.at(y, x, 0) == 1.0f) {
                    // out(y, x) = padded(y + oy, x + ox) = img(y + oy - 21, x + ox - 21)
                    ys.insert(42 + 21 - y);
                    xs.insert(42 + 21 - x);
                    ++found;
                }
            }
        }
        REQUIRE(found == 1);
    }
    CHECK(*ys.begin() == 0);
    CHECK(*ys.rbegin() == 42);
    CHECK(ys.size() == 43);
    CHECK(xs.size() == 43);
}

TEST_CASE("flips are involutions and p = 0 is the identity") {
    const auto img = random_image(9, 3, 3);
    RngStream rng(1);
    for (const auto axis : {FlipAxis::horizontal, FlipAxis::vertical}) {
        CHECK(random_flip(img, axis, 0.0, rng) == img);
        CHECK(random_flip(random_flip(img, axis, 1.0, rng), axis, 1.0, rng) == img);
        CHECK_FALSE(flip(img, axis) == img);
    }
    CHECK(flip(img, FlipAxis::horizontal).at(2, 0, 1) == img.at(2, 8, 1));
    CHECK(flip(img, FlipAxis::vertical).at(0, 4, 2) == img.at(8, 4, 2));
    CHECK_THROWS_AS(random_flip(img, FlipAxis::horizontal, 1.5, rng), ValidationError);
}

TEST_CASE("flip rate at p = 0.5 lies in the 99% binomial interval") {
    const auto img = random_image(5, 1, 4);
    const auto flipped = flip(img, FlipAxis::horizontal);
    RngStream rng(6);
    int hits = 0;
    for (int t = 0; t < 10000; ++t) {
        hits += random_flip(img, FlipAxis::horizontal, 0.5, rng) == flipped;
    }
    CHECK(hits >= 4700);
    CHECK(hits <= 5300);
}

TEST_CASE("rotation by a full turn is the identity and constants stay constant inside") {
    const auto img = random_image(28, 1, 8);
    const auto full = rotate(img, 360.0);
    float worst = 0.0f;
    for (std::size_t i = 0; i < img.pixels().size(); ++i) {
        worst = std::max(worst, std::abs(full.pixels()[i] - img.pixels()[i]));
    }
    CHECK(worst <= 1e-6f);

    const ImageTensor flat(28, 28, 1, 0.6f);
    const auto r = rotate(flat, 17.0);
    for (int y = 10; y < 18; ++y) {
        for (int x = 10; x < 18; ++x) {
            CHECK(std::abs(r.at(y, x, 0) - 0.6f) <= 1e-6f);
        }
    }
    // Corners rotate out of frame and are zero filled.
    CHECK(rotate(flat, 45.0).at(0, 0, 0) == 0.0f);
    CHECK(rotate(img, 90.0, Interpolation::nearest).in_unit_range());
}

TEST_CASE("quarter turns with nearest sampling permute pixels exactly") {
    const auto img = ramp(7);
    const auto q = rotate(img, 90.0, Interpolation::nearest);
    const auto back = rotate(rotate(rotate(q, 90.0, Interpolation::nearest), 90.0, Interpolation::nearest), 90.0,
                             Interpolation::nearest);
    CHECK(back == img);
}

TEST_CASE("rotation ranges are validated") {
    const auto img = random_image(8, 1, 9);
    RngStream rng(0);
    CHECK_THROWS_AS(random_rotation(img, 0.0, 30.0, rng), ValidationError);
    CHECK_THROWS_AS(random_rotation(img, 40.0, 30.0, rng), ValidationError);
    CHECK_THROWS_AS(random_rotation(img, 1.0, 360.0, rng), ValidationError);
}

TEST_CASE("pixel dropout endpoints and calibration") {
    ImageTensor ones(84, 84, 3, 1.0f);
    RngStream rng(10);
    CHECK(pixel_dropout(ones, 0.0, rng) == ones);
    CHECK(pixel_dropout(ones, 1.0, rng) == ImageTensor(84, 84, 3, 0.0f));
    for (const double p : {0.3, 0.7}) {
        const auto out = pixel_dropout(ones, p, rng);
        int zeros = 0;
        for (int y = 0; y < 84; ++y) {
            for (int x = 0; x < 84; ++x) {
                const bool z = out.at(y, x, 0) == 0.0f;
                zeros += z;
                // Channels of a position drop together.
                CHECK((out.at(y, x, 1) == 0.0f) == z);
                CHECK((out.at(y, x, 2) == 0.0f) == z);
            }
        }
        CHECK(within_3_sigma(zeros, 84 * 84, p));
    }
}

TEST_CASE("cutout bounds, full coverage and locality") {
    const ImageTensor ones(28, 28, 1, 1.0f);
    RngStream rng(11);
    for (int t = 0; t < 500; ++t) {
        std::vector<SquareRegion> drawn;
        const auto out = cutout(ones, 5, 4, 14, rng, &drawn);
        REQUIRE(drawn.size() == 5);
        int zeros = 0;
        for (int y = 0; y < 28; ++y) {
            for (int x = 0; x < 28; ++x) {
                const bool inside = std::any_of(drawn.begin(), drawn.end(), [&](const SquareRegion& r) {
                    return y >= r.y0 && y < r.y1 && x >= r.x0 && x < r.x1;
                });
                zeros += out.at(y, x, 0) == 0.0f;
                CHECK((out.at(y, x, 0) == 0.0f) == inside);
            }
        }
        CHECK(zeros <= 5 * 14 * 14);
    }
    auto full = ones;
    erase(full, centered_square(full, 14, 14, 28));
    CHECK(full == ImageTensor(28, 28, 1, 0.0f));
    const ImageTensor zeros(28, 28, 1, 0.0f);
    CHECK(cutout(zeros, 5, 4, 14, rng) == zeros);
    CHECK_THROWS_AS(cutout(ones, 5, 4, 29, rng), ValidationError);
    CHECK_THROWS_AS(cutout(ones, 0, 4, 14, rng), ValidationError);
}

TEST_CASE("warp with zero magnitude is the identity and changes stay inside the region") {
    const auto img = random_image(28, 1, 12);
    RngStream rng(13);
    CHECK(warp(img, 14, 0, rng, 0.0) == img);
    for (int t = 0; t < 200; ++t) {
        SquareRegion r;
        const auto out = warp(img, 14, 6, rng, 0.1, &r);
        CHECK(out.same_shape(img));
        CHECK(out.in_unit_range());
        CHECK(r.y1 - r.y0 >= 14);
        CHECK(r.y1 - r.y0 <= 20);
        for (int y = 0; y < 28; ++y) {
            for (int x = 0; x < 28; ++x) {
                if (y < r.y0 || y >= r.y1 || x < r.x0 || x >= r.x1) {
                    CHECK(out.at(y, x, 0) == img.at(y, x, 0));
                }
            }
        }
    }
    CHECK_THROWS_AS(warp(img, 25, 6, rng), ValidationError);
}

TEST_CASE("grayscale conversion") {
    auto gray = random_image(6, 1, 14);
    ImageTensor rgb(6, 6, 3);
    for (int y = 0; y < 6; ++y) {
        for (int x = 0; x < 6; ++x) {
            for (int c = 0; c < 3; ++c) {
                rgb.at(y, x, c) = gray.at(y, x, 0);
            }
        }
    }
    CHECK(grayscale(rgb) == rgb);
    const auto colour = random_image(6, 3, 15);
    const auto g = grayscale(colour);
    CHECK(g.at(1, 2, 0) == g.at(1, 2, 2));
    CHECK(std::abs(g.at(1, 2, 0) - (0.299 * colour.at(1, 2, 0) + 0.587 * colour.at(1, 2, 1) +
                                    0.114 * colour.at(1, 2, 2))) <= 1e-6);
    RngStream rng(16);
    CHECK_THROWS_AS(random_grayscale(gray, 0.5, rng), ValidationError);

    int hits = 0;
    for (int t = 0; t < 10000; ++t) {
        hits += random_grayscale(colour, 0.5, rng) == g;
    }
    CHECK(within_3_sigma(hits, 10000, 0.5));
}

TEST_CASE("every operator preserves shape and range and is seed-deterministic") {
    for (const auto dataset : {DatasetKind::omniglot, DatasetKind::miniimagenet}) {
        const int side = dataset == DatasetKind::omniglot ? 28 : 84;
        const int channels = dataset == DatasetKind::omniglot ? 1 : 3;
        const auto img = random_image(side, channels, 17);
        const std::string all = dataset == DatasetKind::omniglot ? "CHVRW+DROP+CUT" : "CHVRWG+DROP+CUT";
        const auto policy = policy_from_name(all, dataset);
        for (const auto& o : policy.ops()) {
            for (std::uint64_t seed = 0; seed < 20; ++seed) {
                RngStream a(seed);
                RngStream b(seed);
                const auto x = apply_op(img, o, a);
                CHECK(x.same_shape(img));
                CHECK(x.in_unit_range());
                CHECK(x == apply_op(img, o, b));
            }
        }
    }
}

TEST_CASE("policy names parse to table hyperparameters") {
    const auto chvw = policy_from_name("CHVW", DatasetKind::omniglot);
    REQUIRE(chvw.ops().size() == 4);
    CHECK(std::get<op::Crop>(chvw.ops()[0]).padding == 7);
    CHECK(std::get<op::HFlip>(chvw.ops()[1]).p == 0.5);
    CHECK(std::get<op::VFlip>(chvw.ops()[2]).p == 0.5);
    CHECK(std::get<op::Warp>(chvw.ops()[3]).region_base == 14);
    CHECK(std::get<op::Warp>(chvw.ops()[3]).region_jitter == 6);

    const auto mini = policy_from_name("CHVWG", DatasetKind::miniimagenet);
    CHECK(mini.has<op::Grayscale>());
    CHECK(std::get<op::Crop>(mini.ops()[0]).padding == 21);
    CHECK(std::get<op::Warp>(mini.ops()[3]).region_base == 42);
    CHECK(std::get<op::Warp>(mini.ops()[3]).region_jitter == 41);

    const auto omni_all = policy_from_name("CHVR+DROP+CUT", DatasetKind::omniglot);
    const auto rot = std::get<op::Rotate>(omni_all.ops()[3]);
    CHECK(rot.degrees_lo == 1.0);
    CHECK(rot.degrees_hi == 30.0);
    CHECK(std::get<op::Dropout>(omni_all.ops()[4]).p == 0.3);
    const auto cut = std::get<op::Cutout>(omni_all.ops()[5]);
    CHECK(cut.holes == 5);
    CHECK(cut.side_lo == 4);
    CHECK(cut.side_hi == 14);

    const auto mini_all = policy_from_name("CHVR+DROP+CUT", DatasetKind::miniimagenet);
    CHECK(std::get<op::Rotate>(mini_all.ops()[3]).degrees_hi == 270.0);
    CHECK(std::get<op::Dropout>(mini_all.ops()[4]).p == 0.7);
    CHECK(std::get<op::Cutout>(mini_all.ops()[5]).side_lo == 11);
    CHECK(std::get<op::Cutout>(mini_all.ops()[5]).side_hi == 42);
}

TEST_CASE("policy names are canonical") {
    CHECK(policy_from_name("CHVR + CUT + DROP", DatasetKind::omniglot).name() == "CHVR+DROP+CUT");
    CHECK(policy_from_name("vhc", DatasetKind::omniglot).name() == "CHV");
    CHECK(policy_from_name("", DatasetKind::omniglot).name() == "none");
    CHECK(policy_from_name("none", DatasetKind::omniglot).empty());
    CHECK(policy_from_name("DROP", DatasetKind::omniglot).name() == "DROP");
    CHECK(policy_from_name("GCHV", DatasetKind::miniimagenet).name() == "CHVG");
    CHECK_THROWS_AS(policy_from_name("CHVX", DatasetKind::omniglot), ParseError);
    CHECK_THROWS_AS(policy_from_name("CHV++CUT", DatasetKind::omniglot), ParseError);
    CHECK_THROWS_AS(policy_from_name("CHVC", DatasetKind::omniglot), ParseError);
    CHECK_THROWS_AS(policy_from_name("CHVG", DatasetKind::omniglot), ValidationError);
}

TEST_CASE("synthetic policies scale with the image side") {
    const auto p = policy_from_name("CHVW+CUT", DatasetKind::synthetic, 14);
    CHECK(std::get<op::Crop>(p.ops()[0]).padding == 4);  // 7 * 14 / 28 rounded
    CHECK(std::get<op::Cutout>(p.ops()[4]).side_hi <= 14);
    const auto img = random_image(14, 1, 3);
    RngStream rng(4);
    CHECK(apply_policy(img, p, rng).same_shape(img));
}

TEST_CASE("apply_policy is deterministic and the empty policy is the identity") {
    const auto img = random_image(28, 1, 18);
    const auto p = policy_from_name("CHVRW+DROP+CUT", DatasetKind::omniglot);
    RngStream a(3);
    RngStream b(3);
    CHECK(apply_policy(img, p, a) == apply_policy(img, p, b));
    CHECK(a.position() == b.position());
    RngStream c(3);
    CHECK(apply_policy(img, AugmentationPolicy{}, c) == img);
    CHECK(c.position() == 0);
}

TEST_CASE("CHV draws only crop and flip randomness") {
    const auto img = random_image(28, 1, 19);
    const auto chv = policy_from_name("CHV", DatasetKind::omniglot);
    RngStream a(21);
    const auto out = apply_policy(img, chv, a);
    RngStream b(21);
    auto manual = random_crop(img, 7, b);
    manual = random_flip(manual, FlipAxis::horizontal, 0.5, b);
    manual = random_flip(manual, FlipAxis::vertical, 0.5, b);
    CHECK(out == manual);
    CHECK(a.position() == b.position());
}
