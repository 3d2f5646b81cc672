#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "aal/augment.hpp"
#include "aal/dataset.hpp"
#include "aal/error.hpp"
#include "aal/image_io.hpp"
#include "aal/rng.hpp"

namespace aal {

/// One few-shot task. Labels are episode-local, in [0, n_way).
struct Episode {
    std::vector<ImageTensor> support_images;
    std::vector<int> support_labels;
    std::vector<ImageTensor> target_images;
    std::vector<int> target_labels;
    int n_way = 0;
    int k_shot = 0;
    int target_per_class = 0;
    // Source indices (dataset or pool) of every support / target image. For
    // unsupervised episodes a target carries the index of the image it was augmented from.
    std::vector<int> support_ids;
    std::vector<int> target_ids;
};

struct EpisodeSpec {
    int n_way = 5;
    int k_shot = 1;
    int target_per_class = 1;
    // Used by the unsupervised sampler only.
    AugmentationPolicy policy;

    void validate() const {
        require(n_way >= 2, "EpisodeSpec: n_way must be at least 2");
        require(k_shot >= 1, "EpisodeSpec: k_shot must be at least 1");
        require(target_per_class >= 1, "EpisodeSpec: target_per_class must be at least 1");
    }
};

/// True when every label in [0, n) appears exactly `per_class` times.
inline bool is_balanced(const std::vector<int>& labels, int n, int per_class) {
    std::vector<int> counts(static_cast<std::size_t>(n), 0);
    for (const int l : labels) {
        if (l < 0 || l >= n) {
            return false;
        }
        ++counts[static_cast<std::size_t>(l)];
    }
    return std::all_of(counts.begin(), counts.end(), [per_class](int c) { return c == per_class; });
}

/// Labeled episode: N classes, K support and J disjoint target instances per class.
inline Episode sample_supervised_episode(const DatasetIndex& d, const EpisodeSpec& spec, RngStream& rng) {
    spec.validate();
    const int n = spec.n_way;
    const int k = spec.k_shot;
    const int j = spec.target_per_class;
    if (d.class_count() < n) {
        throw SamplingError("need " + std::to_string(n) + " classes, dataset has " + std::to_string(d.class_count()));
    }
    // Classes come back in random order; position in that order is the local label.
    const auto classes = rng.sample_without_replacement(d.class_count(), n);
    Episode ep;
    ep.n_way = n;
    ep.k_shot = k;
    ep.target_per_class = j;
    for (int local = 0; local < n; ++local) {
        const auto& inst = d.instances_of(classes[static_cast<std::size_t>(local)]);
        if (static_cast<int>(inst.size()) < k + j) {
            throw SamplingError("class " + std::to_string(d.global_class(classes[static_cast<std::size_t>(local)])) +
                                " has " + std::to_string(inst.size()) + " instances, need K+J = " +
                                std::to_string(k + j));
        }
    }
    for (int local = 0; local < n; ++local) {
        const auto& inst = d.instances_of(classes[static_cast<std::size_t>(local)]);
        const auto pick = rng.sample_without_replacement(static_cast<int>(inst.size()), k + j);
        for (int i = 0; i < k + j; ++i) {
            const int id = inst[static_cast<std::size_t>(pick[static_cast<std::size_t>(i)])];
            if (i < k) {
                ep.support_images.push_back(d.image(id));
                ep.support_labels.push_back(local);
                ep.support_ids.push_back(id);
            } else {
                ep.target_images.push_back(d.image(id));
                ep.target_labels.push_back(local);
                ep.target_ids.push_back(id);
            }
        }
    }
    return ep;
}

/// Label-free episode: N*K pool images under a balanced random labeling; each
/// support image is augmented J/K times (fresh randomness each time) to form
/// the target set, keeping its label.
inline Episode sample_unsupervised_episode(const UnlabeledPool& pool, const EpisodeSpec& spec, RngStream& rng) {
    spec.validate();
    const int n = spec.n_way;
    const int k = spec.k_shot;
    if (spec.target_per_class % k != 0) {
        throw SamplingError("unsupervised episodes need target_per_class to be a multiple of k_shot");
    }
    const int copies = spec.target_per_class / k;
    const auto needed = static_cast<std::size_t>(n) * static_cast<std::size_t>(k);
    if (pool.size() < needed) {
        throw SamplingError("pool has " + std::to_string(pool.size()) + " images, need N*K = " +
                            std::to_string(needed));
    }
    const auto ids = rng.sample_without_replacement(static_cast<int>(pool.size()), n * k);
    std::vector<int> labels;
    labels.reserve(needed);
    for (int c = 0; c < n; ++c) {
        labels.insert(labels.end(), static_cast<std::size_t>(k), c);
    }
    rng.shuffle(labels);

    Episode ep;
    ep.n_way = n;
    ep.k_shot = k;
    ep.target_per_class = spec.target_per_class;
    ep.support_ids = ids;
    ep.support_labels = labels;
    for (const int id : ids) {
        ep.support_images.push_back(pool.image(id));
    }
    for (std::size_t i = 0; i < needed; ++i) {
        for (int r = 0; r < copies; ++r) {
            ep.target_images.push_back(apply_policy(ep.support_images[i], spec.policy, rng));
            ep.target_labels.push_back(labels[i]);
            ep.target_ids.push_back(ids[i]);
        }
    }
    return ep;
}

/// Independent episodes, episode i drawn from substream i of a stream seeded
/// by one draw from `rng`.
template <class Source, class Sampler>
std::vector<Episode> make_meta_batch(const Source& source, const EpisodeSpec& spec, int batch_size, RngStream& rng,
                                     Sampler sampler) {
    require(batch_size >= 1, "make_meta_batch: batch_size must be at least 1");
    const RngStream base(rng.next_u64());
    std::vector<Episode> batch;
    batch.reserve(static_cast<std::size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) {
        RngStream sub = base.substream(static_cast<std::uint64_t>(i));
        batch.push_back(sampler(source, spec, sub));
    }
    return batch;
}

inline std::vector<Episode> make_meta_batch(const DatasetIndex& d, const EpisodeSpec& spec, int batch_size,
                                            RngStream& rng) {
    return make_meta_batch(d, spec, batch_size, rng,
                           [](const DatasetIndex& s, const EpisodeSpec& e, RngStream& r) {
                               return sample_supervised_episode(s, e, r);
                           });
}

inline std::vector<Episode> make_meta_batch(const UnlabeledPool& pool, const EpisodeSpec& spec, int batch_size,
                                            RngStream& rng) {
    return make_meta_batch(pool, spec, batch_size, rng,
                           [](const UnlabeledPool& s, const EpisodeSpec& e, RngStream& r) {
                               return sample_unsupervised_episode(s, e, r);
                           });
}

/// Writes `dir/support/NNN.pgm`, `dir/target/NNN.pgm` (PPM for colour) and a
/// `labels.csv` manifest with columns set,index,label,source_id,file.
inline void dump_episode(const Episode& ep, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "support");
    fs::create_directories(dir / "target");
    std::ofstream manifest(dir / "labels.csv");
    if (!manifest) {
        throw Error("cannot write manifest in " + dir.string());
    }
    manifest << "set,index,label,source_id,file\n";
    auto write_set = [&](const char* set, const std::vector<ImageTensor>& imgs, const std::vector<int>& labels,
                         const std::vector<int>& ids) {
        for (std::size_t i = 0; i < imgs.size(); ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "%03zu.%s", i, imgs[i].channels() == 1 ? "pgm" : "ppm");
            const auto rel = fs::path(set) / name;
            write_pnm(imgs[i], dir / rel);
            manifest << set << "," << i << "," << labels[i] << "," << (i < ids.size() ? ids[i] : -1) << ","
                     << rel.generic_string() << "\n";
        }
    };
    write_set("support", ep.support_images, ep.support_labels, ep.support_ids);
    write_set("target", ep.target_images, ep.target_labels, ep.target_ids);
}

}  // namespace aal
