#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "aal/episode.hpp"

using namespace aal;
namespace fs = std::filesystem;

namespace {

EpisodeSpec spec(int n, int k, int j, AugmentationPolicy policy = {}) {
    EpisodeSpec s;
    s.n_way = n;
    s.k_shot = k;
    s.target_per_class = j;
    s.policy = std::move(policy);
    return s;
}

}  // namespace

TEST_CASE("supervised episodes are balanced, disjoint and label-consistent") {
    const auto d = make_synthetic(12, 20, 8, 1);
    RngStream rng(2);
    for (int t = 0; t < 200; ++t) {
        const auto ep = sample_supervised_episode(d, spec(5, 1, 15), rng);
        CHECK(is_balanced(ep.support_labels, 5, 1));
        CHECK(is_balanced(ep.target_labels, 5, 15));
        std::set<int> support(ep.support_ids.begin(), ep.support_ids.end());
        for (const int id : ep.target_ids) {
            CHECK(support.count(id) == 0);
        }
        std::set<int> all(ep.support_ids.begin(), ep.support_ids.end());
        all.insert(ep.target_ids.begin(), ep.target_ids.end());
        CHECK(all.size() == 80);
        // Every local label maps to a single dataset class.
        std::vector<int> cls(5, -1);
        auto check = [&](const std::vector<int>& ids, const std::vector<int>& labels,
                         const std::vector<ImageTensor>& imgs) {
            for (std::size_t i = 0; i < ids.size(); ++i) {
                auto& c = cls[static_cast<std::size_t>(labels[i])];
                if (c < 0) {
                    c = d.label(ids[i]);
                }
                CHECK(c == d.label(ids[i]));
                CHECK(imgs[i] == d.image(ids[i]));
            }
        };
        check(ep.support_ids, ep.support_labels, ep.support_images);
        check(ep.target_ids, ep.target_labels, ep.target_images);
        CHECK(std::set<int>(cls.begin(), cls.end()).size() == 5);
    }
}

TEST_CASE("supervised sampling reports impossible requests") {
    const auto d = make_synthetic(4, 20, 8, 1);
    RngStream rng(3);
    CHECK_THROWS_AS(sample_supervised_episode(d, spec(5, 1, 1), rng), SamplingError);
    CHECK_THROWS_AS(sample_supervised_episode(d, spec(3, 6, 15), rng), SamplingError);
    CHECK_THROWS_AS(sample_supervised_episode(d, spec(1, 1, 1), rng), ValidationError);
    CHECK_THROWS_AS(sample_supervised_episode(d, spec(3, 0, 1), rng), ValidationError);
}

TEST_CASE("local labels vary across episodes") {
    const auto d = make_synthetic(10, 5, 8, 1);
    RngStream rng(4);
    std::set<int> classes_for_label0;
    for (int t = 0; t < 50; ++t) {
        const auto ep = sample_supervised_episode(d, spec(5, 1, 1), rng);
        classes_for_label0.insert(d.label(ep.support_ids[static_cast<std::size_t>(
            std::find(ep.support_labels.begin(), ep.support_labels.end(), 0) - ep.support_labels.begin())]));
    }
    CHECK(classes_for_label0.size() > 5);
}

TEST_CASE("unsupervised episodes satisfy the random-labelling contract") {
    const auto pool = strip_labels(make_synthetic(30, 4, 8, 5));
    const auto policy = policy_from_name("CHV", DatasetKind::synthetic, 8);
    RngStream rng(6);
    for (const auto& [n, k] : {std::pair{5, 1}, std::pair{20, 5}}) {
        for (int t = 0; t < 50; ++t) {
            const auto ep = sample_unsupervised_episode(pool, spec(n, k, k, policy), rng);
            CHECK(is_balanced(ep.support_labels, n, k));
            CHECK(ep.target_labels == ep.support_labels);
            CHECK(ep.target_ids == ep.support_ids);
            CHECK(std::set<int>(ep.support_ids.begin(), ep.support_ids.end()).size() ==
                  static_cast<std::size_t>(n * k));
            for (const auto& img : ep.target_images) {
                CHECK(img.same_shape(ep.support_images.front()));
            }
        }
    }
}

TEST_CASE("unsupervised targets are fresh augmentations of their support image") {
    const auto pool = strip_labels(make_synthetic(10, 2, 8, 5));
    RngStream rng(7);
    const auto none = sample_unsupervised_episode(pool, spec(5, 1, 3), rng);
    REQUIRE(none.target_images.size() == 15);
    for (std::size_t i = 0; i < 15; ++i) {
        CHECK(none.target_images[i] == none.support_images[i / 3]);
        CHECK(none.target_labels[i] == none.support_labels[i / 3]);
    }
    const auto policy = policy_from_name("CHVW", DatasetKind::synthetic, 8);
    int distinct = 0;
    for (int t = 0; t < 20; ++t) {
        const auto ep = sample_unsupervised_episode(pool, spec(5, 1, 2, policy), rng);
        distinct += !(ep.target_images[0] == ep.target_images[1]);
    }
    CHECK(distinct > 10);
    CHECK_THROWS_AS(sample_unsupervised_episode(pool, spec(5, 2, 3), rng), SamplingError);
    CHECK_THROWS_AS(sample_unsupervised_episode(pool, spec(11, 2, 2), rng), SamplingError);
}

TEST_CASE("meta-batches are reproducible from the seed") {
    const auto d = make_synthetic(10, 5, 8, 1);
    const auto pool = strip_labels(d);
    const auto policy = policy_from_name("CHV", DatasetKind::synthetic, 8);
    RngStream a(9);
    RngStream b(9);
    const auto x = make_meta_batch(pool, spec(5, 1, 1, policy), 4, a);
    const auto y = make_meta_batch(pool, spec(5, 1, 1, policy), 4, b);
    REQUIRE(x.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(x[i].support_ids == y[i].support_ids);
        CHECK(x[i].target_images == y[i].target_images);
    }
    CHECK(x[0].support_ids != x[1].support_ids);
    CHECK(a.position() == b.position());
    const auto s = make_meta_batch(d, spec(5, 1, 2), 3, a);
    CHECK(s.size() == 3);
    CHECK_THROWS_AS(make_meta_batch(d, spec(5, 1, 2), 0, a), ValidationError);
}

TEST_CASE("episodes dump to images and a manifest") {
    const auto d = make_synthetic(6, 4, 8, 1);
    RngStream rng(10);
    const auto ep = sample_supervised_episode(d, spec(3, 1, 2), rng);
    const auto dir = fs::path(AAL_TEST_TMP) / "episode_dump";
    fs::remove_all(dir);
    dump_episode(ep, dir);
    CHECK(fs::exists(dir / "support" / "000.pgm"));
    CHECK(fs::exists(dir / "target" / "005.pgm"));
    std::ifstream in(dir / "labels.csv");
    std::string line;
    int rows = 0;
    std::getline(in, line);
    CHECK(line == "set,index,label,source_id,file");
    while (std::getline(in, line)) {
        ++rows;
    }
    CHECK(rows == 9);
}
