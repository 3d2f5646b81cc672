#pragma once

// Experiment orchestration: meta-training epochs on AAL (or, for sanity runs,
// labeled) episodes, per-epoch scoring on a frozen bank of supervised
// validation episodes, best-epoch selection, final test evaluation and
// ablation grids over augmentation policies.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "aal/checkpoint.hpp"
#include "aal/episode.hpp"
#include "aal/loaders.hpp"
#include "aal/maml.hpp"
#include "aal/protonet.hpp"

namespace aal {

struct ExperimentConfig {
    std::string dataset = "omniglot";
    std::string learner = "protonet";
    int n_way = 5;
    int k_shot = 1;
    int target_per_class = 1;        // targets per class in meta-training episodes
    int eval_target_per_class = 15;  // queries per class in validation / test episodes
    std::string augment = "CHV";
    std::string train_mode = "aal";  // "aal" or "supervised"
    int episodes_per_epoch = 200;
    int epochs = 50;
    int meta_batch = 4;
    int filters = 64;

    std::string metric = "euclidean";  // or "cosine"
    double protonet_lr = 0.01;
    double protonet_momentum = 0.9;

    int inner_steps = 5;
    bool second_order = true;
    bool msl = true;
    int msl_anneal_epochs = 0;  // 0 keeps uniform weights
    double meta_lr = 1e-3;
    double inner_lr = 0.1;
    bool learn_inner_lr = true;
    bool bnwb = true;
    bool bnrs = true;

    int val_episodes = 200;
    int test_episodes = 600;

    int synthetic_side = 28;
    int synthetic_train_classes = 64;
    int synthetic_val_classes = 16;
    int synthetic_test_classes = 20;
    int synthetic_per_class = 20;
    std::uint64_t synthetic_seed = 0;

    std::uint64_t seed = 0;
    std::string out;  // empty: nothing is written

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

    DatasetKind dataset_kind() const { return dataset_from_string(dataset); }
    bool is_maml() const { return learner == "maml"; }
    int image_side() const {
        switch (dataset_kind()) {
            case DatasetKind::omniglot: return 28;
            case DatasetKind::miniimagenet: return 84;
            case DatasetKind::synthetic: return synthetic_side;
        }
        return 0;
    }
    int channels() const { return dataset_kind() == DatasetKind::miniimagenet ? 3 : 1; }
    AugmentationPolicy policy() const { return policy_from_name(augment, dataset_kind(), synthetic_side); }

    MamlConfig maml() const {
        MamlConfig m;
        m.inner_steps = inner_steps;
        m.second_order = second_order;
        m.msl_enabled = msl;
        m.meta_lr = meta_lr;
        m.alpha_init = inner_lr;
        m.learn_alpha = learn_inner_lr;
        m.bnwb = bnwb;
        m.bnrs = bnrs;
        return m;
    }

    ProtonetConfig protonet() const {
        ProtonetConfig p;
        p.metric = metric == "cosine" ? Metric::cosine : Metric::squared_euclidean;
        p.momentum = protonet_momentum;
        return p;
    }

    BackboneConfig backbone() const {
        BackboneConfig b{channels(), image_side(), filters, 4, HeadKind::embedding, 0};
        if (is_maml()) {
            b.head = HeadKind::linear;
            b.n_out = n_way;
        }
        return b;
    }

    void validate() const {
        require(learner == "maml" || learner == "protonet", "config: learner must be maml or protonet");
        require(train_mode == "aal" || train_mode == "supervised", "config: train_mode must be aal or supervised");
        require(metric == "euclidean" || metric == "cosine", "config: metric must be euclidean or cosine");
        require(n_way >= 2 && k_shot >= 1 && target_per_class >= 1 && eval_target_per_class >= 1,
                "config: N >= 2, K >= 1 and J >= 1 required");
        require(episodes_per_epoch >= 1 && epochs >= 0 && meta_batch >= 1 && filters >= 1,
                "config: episodes_per_epoch, meta_batch and filters must be positive, epochs non-negative");
        require(val_episodes >= 1 && test_episodes >= 1, "config: evaluation episode counts must be positive");
        require(protonet_lr >= 0.0 && meta_lr >= 0.0 && inner_lr >= 0.0, "config: learning rates must be non-negative");
        require(synthetic_side >= 16, "config: synthetic images need a side of at least 16 for four pooling blocks");
        const auto p = policy();  // throws on tokens invalid for the dataset
        if (train_mode == "aal") {
            require(p.has<op::Crop>() && p.has<op::HFlip>() && p.has<op::VFlip>(),
                    "config: AAL training policies must include the CHV baseline, got " + p.name());
            require(target_per_class % k_shot == 0, "config: AAL target_per_class must be a multiple of k_shot");
        }
        if (is_maml()) {
            maml().validate();
        }
        backbone().validate();
    }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
    return {{"dataset", c.dataset},
            {"learner", c.learner},
            {"n_way", c.n_way},
            {"k_shot", c.k_shot},
            {"target_per_class", c.target_per_class},
            {"eval_target_per_class", c.eval_target_per_class},
            {"augment", c.augment},
            {"train_mode", c.train_mode},
            {"episodes_per_epoch", c.episodes_per_epoch},
            {"epochs", c.epochs},
            {"meta_batch", c.meta_batch},
            {"filters", c.filters},
            {"metric", c.metric},
            {"protonet_lr", c.protonet_lr},
            {"protonet_momentum", c.protonet_momentum},
            {"inner_steps", c.inner_steps},
            {"second_order", c.second_order},
            {"msl", c.msl},
            {"msl_anneal_epochs", c.msl_anneal_epochs},
            {"meta_lr", c.meta_lr},
            {"inner_lr", c.inner_lr},
            {"learn_inner_lr", c.learn_inner_lr},
            {"bnwb", c.bnwb},
            {"bnrs", c.bnrs},
            {"val_episodes", c.val_episodes},
            {"test_episodes", c.test_episodes},
            {"synthetic_side", c.synthetic_side},
            {"synthetic_train_classes", c.synthetic_train_classes},
            {"synthetic_val_classes", c.synthetic_val_classes},
            {"synthetic_test_classes", c.synthetic_test_classes},
            {"synthetic_per_class", c.synthetic_per_class},
            {"synthetic_seed", c.synthetic_seed},
            {"seed", c.seed},
            {"out", c.out}};
}

/// Overlays the keys of a flat JSON object onto `base`. Unknown keys and
/// mistyped values are rejected.
inline ExperimentConfig apply_config_json(ExperimentConfig base, const nlohmann::json& j) {
    if (!j.is_object()) {
        throw ParseError("config: expected a flat JSON object");
    }
    nlohmann::json merged = to_json(base);
    for (const auto& [key, value] : j.items()) {
        if (!merged.contains(key)) {
            throw ParseError("config: unknown key '" + key + "'");
        }
        if (value.is_structured() || (merged[key].is_string() != value.is_string()) ||
            (merged[key].is_boolean() != value.is_boolean())) {
            throw ParseError("config: wrong type for key '" + key + "'");
        }
        merged[key] = value;
    }
    ExperimentConfig c;
    try {
        c.dataset = merged["dataset"];
        c.learner = merged["learner"];
        c.n_way = merged["n_way"];
        c.k_shot = merged["k_shot"];
        c.target_per_class = merged["target_per_class"];
        c.eval_target_per_class = merged["eval_target_per_class"];
        c.augment = merged["augment"];
        c.train_mode = merged["train_mode"];
        c.episodes_per_epoch = merged["episodes_per_epoch"];
        c.epochs = merged["epochs"];
        c.meta_batch = merged["meta_batch"];
        c.filters = merged["filters"];
        c.metric = merged["metric"];
        c.protonet_lr = merged["protonet_lr"];
        c.protonet_momentum = merged["protonet_momentum"];
        c.inner_steps = merged["inner_steps"];
        c.second_order = merged["second_order"];
        c.msl = merged["msl"];
        c.msl_anneal_epochs = merged["msl_anneal_epochs"];
        c.meta_lr = merged["meta_lr"];
        c.inner_lr = merged["inner_lr"];
        c.learn_inner_lr = merged["learn_inner_lr"];
        c.bnwb = merged["bnwb"];
        c.bnrs = merged["bnrs"];
        c.val_episodes = merged["val_episodes"];
        c.test_episodes = merged["test_episodes"];
        c.synthetic_side = merged["synthetic_side"];
        c.synthetic_train_classes = merged["synthetic_train_classes"];
        c.synthetic_val_classes = merged["synthetic_val_classes"];
        c.synthetic_test_classes = merged["synthetic_test_classes"];
        c.synthetic_per_class = merged["synthetic_per_class"];
        c.synthetic_seed = merged["synthetic_seed"];
        c.seed = merged["seed"];
        c.out = merged["out"];
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, const ExperimentConfig& base = {}) {
    std::ifstream in(path);
    if (!in) {
        throw LoadError("cannot read config file: " + path.string());
    }
    try {
        return apply_config_json(base, nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("config " + path.string() + ": " + e.what());
    }
}

/// Meta-train / meta-val / meta-test splits for the configured dataset. Real
/// datasets are read from `data_root/omniglot` or `data_root/miniimagenet`.
inline SplitTriple load_splits(const ExperimentConfig& cfg, const std::filesystem::path& data_root) {
    switch (cfg.dataset_kind()) {
        case DatasetKind::omniglot: return load_omniglot(data_root / "omniglot");
        case DatasetKind::miniimagenet: return load_miniimagenet(data_root / "miniimagenet");
        case DatasetKind::synthetic: {
            auto s = make_synthetic_splits(cfg.synthetic_train_classes, cfg.synthetic_val_classes,
                                           cfg.synthetic_test_classes, cfg.synthetic_per_class, cfg.synthetic_side,
                                           cfg.synthetic_seed);
            return {std::move(s.train), std::move(s.val), std::move(s.test)};
        }
    }
    throw ValidationError("unknown dataset");
}

// Substream indices of the run's root RngStream.
namespace streams {
inline constexpr std::uint64_t init = 0;
inline constexpr std::uint64_t train = 1;
inline constexpr std::uint64_t validation = 2;
inline constexpr std::uint64_t test = 3;
}  // namespace streams

inline Model init_model(const ExperimentConfig& cfg) {
    RngStream rng = RngStream(cfg.seed).substream(streams::init);
    if (cfg.is_maml()) {
        return init_meta_params(cfg.backbone(), cfg.maml(), rng);
    }
    return init_backbone(cfg.backbone(), rng);
}

inline double evaluate_episode(const Model& model, const ExperimentConfig& cfg, const Episode& ep) {
    if (const auto* mp = std::get_if<MetaParams>(&model)) {
        return maml_evaluate(*mp, cfg.maml(), ep);
    }
    return protonet_evaluate(std::get<ConvBackboneParams>(model), ep, cfg.protonet());
}

/// `count` supervised N-way K-shot episodes with eval_target_per_class queries per class.
inline std::vector<Episode> episode_bank(const DatasetIndex& d, const ExperimentConfig& cfg, int count,
                                         RngStream rng) {
    EpisodeSpec spec;
    spec.n_way = cfg.n_way;
    spec.k_shot = cfg.k_shot;
    spec.target_per_class = cfg.eval_target_per_class;
    return make_meta_batch(d, spec, count, rng);
}

inline double mean_accuracy(const Model& model, const ExperimentConfig& cfg, std::span<const Episode> bank) {
    double total = 0.0;
    for (const auto& ep : bank) {
        total += evaluate_episode(model, cfg, ep);
    }
    return total / static_cast<double>(bank.size());
}

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_acc = 0.0;

    friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainingRecord {
    std::string label;  // policy name
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;  // 0: the initialization
    double best_val_acc = 0.0;

    friend bool operator==(const TrainingRecord&, const TrainingRecord&) = default;
};

inline nlohmann::json to_json(const TrainingRecord& r) {
    nlohmann::json e = nlohmann::json::array();
    for (const auto& x : r.epochs) {
        e.push_back({{"epoch", x.epoch}, {"train_loss", x.train_loss}, {"val_acc", x.val_acc}});
    }
    return {{"label", r.label}, {"best_epoch", r.best_epoch}, {"best_val_acc", r.best_val_acc}, {"epochs", e}};
}

inline TrainingRecord record_from_json(const nlohmann::json& j) {
    TrainingRecord r;
    r.label = j.at("label").get<std::string>();
    r.best_epoch = j.at("best_epoch").get<int>();
    r.best_val_acc = j.at("best_val_acc").get<double>();
    for (const auto& x : j.at("epochs")) {
        r.epochs.push_back({x.at("epoch").get<int>(), x.at("train_loss").get<double>(), x.at("val_acc").get<double>()});
    }
    return r;
}

struct TrainingOutcome {
    TrainingRecord record;
    Model best;
    Model last;
};

namespace detail {

// The output directory is left out so runs differing only in where they write produce identical files.
inline nlohmann::json run_meta(const ExperimentConfig& cfg, int epoch, double val_acc) {
    auto config = to_json(cfg);
    config.erase("out");
    return {{"dataset", cfg.dataset}, {"policy", cfg.policy().name()}, {"n_way", cfg.n_way},
            {"k_shot", cfg.k_shot},   {"seed", cfg.seed},               {"epoch", epoch},
            {"val_acc", val_acc},     {"config", config}};
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream out(path);
    out << j.dump(2) << "\n";
    if (!out) {
        throw Error("cannot write " + path.string());
    }
}

}  // namespace detail

/// Meta-trains for cfg.epochs epochs. After each epoch the model is scored on
/// a validation bank drawn once per run; the best epoch (earliest on ties) is
/// returned as `best`. With cfg.out set, writes config.json, record.json,
/// last.ckpt and best.ckpt there.
inline TrainingOutcome run_meta_training(const ExperimentConfig& cfg, const SplitTriple& data,
                                         std::ostream* log = nullptr) {
    cfg.validate();
    const RngStream root(cfg.seed);
    const std::filesystem::path out = cfg.out;
    if (!out.empty()) {
        std::filesystem::create_directories(out);
        detail::write_json(out / "config.json", to_json(cfg));
    }

    TrainingOutcome result{{cfg.policy().name(), {}, 0, 0.0}, init_model(cfg), {}};
    Model model = result.best;
    if (cfg.epochs == 0) {
        result.last = model;
        if (!out.empty()) {
            save_checkpoint(out / "best.ckpt", model, detail::run_meta(cfg, 0, 0.0));
            save_checkpoint(out / "last.ckpt", model, detail::run_meta(cfg, 0, 0.0));
            detail::write_json(out / "record.json", to_json(result.record));
        }
        return result;
    }

    const auto val_bank = episode_bank(data.val, cfg, cfg.val_episodes, root.substream(streams::validation));
    RngStream train_rng = root.substream(streams::train);
    EpisodeSpec spec;
    spec.n_way = cfg.n_way;
    spec.k_shot = cfg.k_shot;
    spec.target_per_class = cfg.target_per_class;
    spec.policy = cfg.policy();
    const bool aal = cfg.train_mode == "aal";
    const std::optional<UnlabeledPool> pool = aal ? std::optional(strip_labels(data.train)) : std::nullopt;
    SgdState sgd;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        MamlConfig mcfg = cfg.maml();
        if (cfg.is_maml() && cfg.msl && cfg.msl_anneal_epochs > 0) {
            mcfg.msl_weights = msl_annealed_weights(cfg.inner_steps, epoch - 1, cfg.msl_anneal_epochs);
        }
        double loss_sum = 0.0;
        int done = 0;
        for (int b = 0; done < cfg.episodes_per_epoch; ++b) {
            const int size = std::min(cfg.meta_batch, cfg.episodes_per_epoch - done);
            const auto batch =
                aal ? make_meta_batch(*pool, spec, size, train_rng) : make_meta_batch(data.train, spec, size, train_rng);
            double loss = 0.0;
            try {
                if (auto* mp = std::get_if<MetaParams>(&model)) {
                    *mp = meta_update(*mp, mcfg, batch, &loss);
                } else {
                    auto& p = std::get<ConvBackboneParams>(model);
                    p = protonet_meta_train_step(p, batch, cfg.protonet_lr, cfg.protonet(), sgd, &loss);
                }
                if (!std::isfinite(loss)) {
                    throw NumericalError("non-finite training loss");
                }
            } catch (const NumericalError& e) {
                throw NumericalError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                                     " (episodes " + std::to_string(done) + "-" + std::to_string(done + size - 1) +
                                     "): " + e.what());
            }
            loss_sum += loss * size;
            done += size;
        }
        const double val_acc = mean_accuracy(model, cfg, val_bank);
        result.record.epochs.push_back({epoch, loss_sum / cfg.episodes_per_epoch, val_acc});
        const bool improved = result.record.best_epoch == 0 || val_acc > result.record.best_val_acc;
        if (improved) {
            result.record.best_epoch = epoch;
            result.record.best_val_acc = val_acc;
            result.best = model;
        }
        if (!out.empty()) {
            save_checkpoint(out / "last.ckpt", model, detail::run_meta(cfg, epoch, val_acc));
            if (improved) {
                save_checkpoint(out / "best.ckpt", model, detail::run_meta(cfg, epoch, val_acc));
            }
            detail::write_json(out / "record.json", to_json(result.record));
        }
        if (log) {
            *log << "[" << result.record.label << "] epoch " << epoch << "/" << cfg.epochs << "  train_loss "
                 << loss_sum / cfg.episodes_per_epoch << "  val_acc " << val_acc << "  best " << result.record.best_val_acc
                 << " @ " << result.record.best_epoch << std::endl;
        }
    }
    result.last = model;
    return result;
}

struct EvalReport {
    std::string policy;
    std::string learner;
    std::string dataset;
    int n_way = 0;
    int k_shot = 0;
    std::string split;  // "val" or "test"
    double mean_acc = 0.0;
    double dispersion = 0.0;  // sample std of the per-seed mean accuracies
    int episodes = 0;         // per evaluation seed
    std::uint64_t seed = 0;
    int epoch = 0;
    std::vector<double> seed_means;

    friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

inline constexpr int evaluation_seeds = 3;

inline void require_compatible(const Model& model, const ExperimentConfig& cfg) {
    require(learner_name(model) == cfg.learner,
            "checkpoint holds a " + learner_name(model) + " model, config asks for " + cfg.learner);
    require(backbone_config(model) == cfg.backbone(), "checkpoint backbone does not match the configured dataset / N");
    if (const auto* mp = std::get_if<MetaParams>(&model)) {
        require(mp->inner_steps == cfg.inner_steps, "checkpoint was trained with a different number of inner steps");
    }
}

/// Mean accuracy over `n_episodes` episodes of `split`, repeated for three
/// evaluation seeds; dispersion is the standard deviation (n - 1) of the three means.
inline EvalReport evaluate_split(const Model& model, const ExperimentConfig& cfg, const DatasetIndex& split,
                                 const std::string& split_name, int n_episodes, int epoch = 0) {
    require(n_episodes >= 1, "evaluation needs at least one episode");
    require_compatible(model, cfg);
    EvalReport r{cfg.policy().name(), cfg.learner, cfg.dataset, cfg.n_way, cfg.k_shot, split_name, 0.0, 0.0,
                 n_episodes, cfg.seed, epoch, {}};
    const RngStream base = RngStream(cfg.seed).substream(split_name == "test" ? streams::test : streams::validation);
    for (int s = 0; s < evaluation_seeds; ++s) {
        const auto bank = episode_bank(split, cfg, n_episodes, base.substream(static_cast<std::uint64_t>(100 + s)));
        r.seed_means.push_back(mean_accuracy(model, cfg, bank));
    }
    for (const double m : r.seed_means) {
        r.mean_acc += m / evaluation_seeds;
    }
    double ss = 0.0;
    for (const double m : r.seed_means) {
        ss += (m - r.mean_acc) * (m - r.mean_acc);
    }
    r.dispersion = std::sqrt(ss / (evaluation_seeds - 1));
    return r;
}

inline EvalReport run_final_test(const Model& best, const ExperimentConfig& cfg, const DatasetIndex& test,
                                 int n_episodes, int epoch = 0) {
    return evaluate_split(best, cfg, test, "test", n_episodes, epoch);
}

/// Ablation row sets: nine policies for Omniglot (and synthetic data), plus
/// the warp and grayscale rows for Mini-Imagenet.
inline std::vector<std::string> default_ablation_policies(DatasetKind d) {
    std::vector<std::string> p = {"CHV",     "CHVW",         "CHVR",      "CHV+DROP",     "CHV+CUT",
                                  "CHV+DROP+CUT", "CHVR+DROP", "CHVR+CUT", "CHVR+DROP+CUT"};
    if (d == DatasetKind::miniimagenet) {
        p.push_back("CHVWG");
    }
    return p;
}

struct GridRow {
    std::string policy;
    std::optional<EvalReport> report;
    TrainingRecord record;
    std::string error;  // non-empty when the sub-run failed
};

/// One train + test run per policy with the base config's seed. Duplicate
/// names (after canonicalisation) are dropped with a warning; rows come back
/// sorted by policy name. A failed run is recorded and the grid continues.
inline std::vector<GridRow> run_ablation_grid(const ExperimentConfig& base, const std::vector<std::string>& policies,
                                              const SplitTriple& data, std::ostream* log = nullptr) {
    require(!policies.empty(), "ablation grid needs at least one policy");
    std::set<std::string> names;
    for (const auto& p : policies) {
        const auto name = policy_from_name(p, base.dataset_kind(), base.synthetic_side).name();
        if (!names.insert(name).second && log) {
            *log << "warning: duplicate policy " << name << " dropped from the grid" << std::endl;
        }
    }
    std::vector<GridRow> rows;
    for (const auto& name : names) {
        ExperimentConfig cfg = base;
        cfg.augment = name;
        if (!base.out.empty()) {
            cfg.out = (std::filesystem::path(base.out) / name).string();
        }
        GridRow row{name, std::nullopt, {}, {}};
        try {
            const auto trained = run_meta_training(cfg, data, log);
            row.record = trained.record;
            row.report = run_final_test(trained.best, cfg, data.test, cfg.test_episodes, trained.record.best_epoch);
        } catch (const std::exception& e) {
            row.error = e.what();
            if (log) {
                *log << "error: policy " << name << " failed: " << e.what() << std::endl;
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace aal
