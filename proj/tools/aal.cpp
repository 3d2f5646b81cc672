// aal: meta-training, evaluation and ablation front end.
//
//   aal train    --dataset synthetic --learner protonet --epochs 5 --out runs/p
//   aal test     --checkpoint runs/p/best.ckpt
//   aal ablate   --dataset omniglot --learner maml --out runs/grid
//   aal episodes dump --split train --count 4 --out dump/
//   aal policy dump --augment CHVR+CUT
//   aal plot     runs/grid/CHV runs/grid/CHVW --out plots/

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "aal/checkpoint.hpp"
#include "aal/experiment.hpp"
#include "aal/image_io.hpp"
#include "aal/results.hpp"

namespace fs = std::filesystem;

namespace {

// Experiment flags shared by every subcommand. A flag overrides the matching
// key of --config only when it is given on the command line.
class ExperimentFlags {
public:
    explicit ExperimentFlags(CLI::App* app) {
        app->add_option("--config", config_path_, "flat JSON config file")->check(CLI::ExistingFile);
        app->add_option("--data-root", data_root_, "dataset root (contains omniglot/ or miniimagenet/)")
            ->envname("DATA_ROOT");
        bind(app, "--dataset", &aal::ExperimentConfig::dataset, "omniglot, miniimagenet or synthetic")
            ->check(CLI::IsMember({"omniglot", "miniimagenet", "synthetic"}));
        bind(app, "--learner", &aal::ExperimentConfig::learner, "maml or protonet")
            ->check(CLI::IsMember({"maml", "protonet"}));
        bind(app, "--n-way", &aal::ExperimentConfig::n_way, "classes per episode");
        bind(app, "--k-shot", &aal::ExperimentConfig::k_shot, "support samples per class");
        bind(app, "--target-per-class", &aal::ExperimentConfig::target_per_class,
             "target samples per class in training episodes");
        bind(app, "--augment", &aal::ExperimentConfig::augment, "augmentation policy, e.g. CHV or CHVR+DROP");
        bind(app, "--inner-steps", &aal::ExperimentConfig::inner_steps, "MAML inner-loop steps");
        bind(app, "--second-order", &aal::ExperimentConfig::second_order, "true or false");
        bind(app, "--msl", &aal::ExperimentConfig::msl, "multi-step loss, true or false");
        bind(app, "--epochs", &aal::ExperimentConfig::epochs, "training epochs");
        bind(app, "--episodes-per-epoch", &aal::ExperimentConfig::episodes_per_epoch, "training episodes per epoch");
        bind(app, "--meta-batch", &aal::ExperimentConfig::meta_batch, "episodes per meta-update");
        bind(app, "--seed", &aal::ExperimentConfig::seed, "run seed");
        bind(app, "--out", &aal::ExperimentConfig::out, "output directory");
    }

    bool has_config() const { return !config_path_.empty(); }

    aal::ExperimentConfig resolve(aal::ExperimentConfig base = {}) const {
        if (has_config()) {
            base = aal::load_config(config_path_, base);
        }
        for (const auto& set : setters_) {
            set(base);
        }
        base.validate();
        return base;
    }

    aal::SplitTriple load(const aal::ExperimentConfig& cfg) const {
        if (cfg.dataset_kind() != aal::DatasetKind::synthetic && data_root_.empty()) {
            throw aal::LoadError("no data root: pass --data-root or set DATA_ROOT");
        }
        return aal::load_splits(cfg, data_root_);
    }

private:
    template <class T>
    CLI::Option* bind(CLI::App* app, const std::string& name, T aal::ExperimentConfig::*field,
                      const std::string& help) {
        auto value = std::make_shared<T>();
        CLI::Option* opt = app->add_option(name, *value, help)->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
        setters_.push_back([opt, value, field](aal::ExperimentConfig& c) {
            if (opt->count() > 0) {
                c.*field = *value;
            }
        });
        return opt;
    }

    std::string config_path_;
    std::string data_root_;
    std::vector<std::function<void(aal::ExperimentConfig&)>> setters_;
};

int cmd_train(const ExperimentFlags& flags) {
    const auto cfg = flags.resolve();
    if (cfg.out.empty()) {
        std::cerr << "warning: no --out given, checkpoints are not written\n";
    }
    if (cfg.dataset_kind() == aal::DatasetKind::miniimagenet && cfg.epochs > 5) {
        std::cerr << "note: Mini-Imagenet runs tend to overfit after about 5 epochs; consider --epochs 5 "
                     "(the best validation epoch is kept either way)\n";
    }
    const auto data = flags.load(cfg);
    const auto outcome = aal::run_meta_training(cfg, data, &std::cerr);
    if (!cfg.out.empty() && !outcome.record.epochs.empty()) {
        aal::emit_plots({outcome.record}, cfg.out);
    }
    std::cout << "best epoch " << outcome.record.best_epoch << ", validation accuracy "
              << aal::percent(outcome.record.best_val_acc) << "%\n";
    return 0;
}

int cmd_test(const ExperimentFlags& flags, const std::string& checkpoint_arg, int episodes, const std::string& split,
             const std::string& format, const std::string& results) {
    fs::path checkpoint = checkpoint_arg;
    if (checkpoint.empty()) {
        const auto out = flags.resolve().out;
        if (out.empty()) {
            throw aal::ValidationError("test: pass --checkpoint or --out");
        }
        checkpoint = fs::path(out) / "best.ckpt";
    }
    const auto loaded = aal::load_checkpoint(checkpoint);
    // Without --config the run's own settings are recovered from the checkpoint.
    aal::ExperimentConfig base;
    if (!flags.has_config() && loaded.meta.contains("config")) {
        base = aal::apply_config_json(base, loaded.meta.at("config"));
    }
    const auto cfg = flags.resolve(base);
    const auto data = flags.load(cfg);
    const int n = episodes > 0 ? episodes : (split == "test" ? cfg.test_episodes : cfg.val_episodes);
    const int epoch = loaded.meta.value("epoch", 0);
    const auto report = split == "test" ? aal::run_final_test(loaded.model, cfg, data.test, n, epoch)
                                        : aal::evaluate_split(loaded.model, cfg, data.val, "val", n, epoch);
    const auto fmt = aal::results_format_from_string(format);
    if (!results.empty()) {
        aal::emit_results({report}, fmt, results);
    }
    std::cout << aal::format_results({report}, fmt);
    return 0;
}

int cmd_ablate(const ExperimentFlags& flags, std::vector<std::string> policies, const std::string& format) {
    const auto cfg = flags.resolve();
    if (policies.empty()) {
        policies = aal::default_ablation_policies(cfg.dataset_kind());
    }
    const auto data = flags.load(cfg);
    const auto rows = aal::run_ablation_grid(cfg, policies, data, &std::cerr);
    std::vector<aal::EvalReport> reports;
    std::vector<aal::GridRow> failures;
    std::vector<aal::TrainingRecord> records;
    for (const auto& r : rows) {
        if (r.report) {
            reports.push_back(*r.report);
        } else {
            failures.push_back(r);
        }
        if (!r.record.epochs.empty()) {
            records.push_back(r.record);
        }
    }
    const auto fmt = aal::results_format_from_string(format);
    if (!cfg.out.empty()) {
        const fs::path out = cfg.out;
        aal::emit_results(reports, fmt, out / (fmt == aal::ResultsFormat::csv ? "results.csv" : "results.md"),
                          failures);
        if (!records.empty()) {
            aal::emit_plots(records, out);
        }
    }
    std::cout << aal::format_results(reports, fmt, failures);
    return failures.empty() ? 0 : 3;
}

int cmd_episodes_dump(const ExperimentFlags& flags, const std::string& split, int count) {
    const auto cfg = flags.resolve();
    if (cfg.out.empty()) {
        throw aal::ValidationError("episodes dump: --out is required");
    }
    const auto data = flags.load(cfg);
    const aal::RngStream root(cfg.seed);
    std::vector<aal::Episode> episodes;
    if (split == "train") {
        // The first episodes of epoch 1, batched exactly as in training.
        aal::EpisodeSpec spec{cfg.n_way, cfg.k_shot, cfg.target_per_class, cfg.policy()};
        aal::RngStream rng = root.substream(aal::streams::train);
        const auto pool = aal::strip_labels(data.train);
        while (static_cast<int>(episodes.size()) < count) {
            const int size = std::min(cfg.meta_batch, cfg.episodes_per_epoch - static_cast<int>(episodes.size()) %
                                                                                  cfg.episodes_per_epoch);
            const auto batch = cfg.train_mode == "aal" ? aal::make_meta_batch(pool, spec, size, rng)
                                                       : aal::make_meta_batch(data.train, spec, size, rng);
            episodes.insert(episodes.end(), batch.begin(), batch.end());
        }
        episodes.resize(static_cast<std::size_t>(count));
    } else if (split == "val") {
        episodes = aal::episode_bank(data.val, cfg, count, root.substream(aal::streams::validation));
    } else {
        episodes = aal::episode_bank(data.test, cfg, count, root.substream(aal::streams::test).substream(100));
    }
    for (std::size_t i = 0; i < episodes.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "episode_%03zu", i);
        aal::dump_episode(episodes[i], fs::path(cfg.out) / split / name);
    }
    std::cout << "wrote " << episodes.size() << " " << split << " episodes to " << (fs::path(cfg.out) / split).string()
              << "\n";
    return 0;
}

int cmd_policy_dump(const ExperimentFlags& flags, int samples, int index) {
    const auto cfg = flags.resolve();
    const auto policy = cfg.policy();
    std::cout << "dataset " << cfg.dataset << "\n" << policy.describe();
    if (samples <= 0) {
        return 0;
    }
    if (cfg.out.empty()) {
        throw aal::ValidationError("policy dump: --out is required with --samples");
    }
    const auto data = flags.load(cfg);
    aal::require(index >= 0 && static_cast<std::size_t>(index) < data.train.size(),
                 "policy dump: --index out of range");
    const auto& source = data.train.image(index);
    const fs::path dir = fs::path(cfg.out) / policy.name();
    fs::create_directories(dir);
    const char* ext = source.channels() == 1 ? ".pgm" : ".ppm";
    aal::write_pnm(source, dir / (std::string("source") + ext));
    aal::RngStream rng(cfg.seed);
    for (int s = 0; s < samples; ++s) {
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%03d%s", s, ext);
        aal::write_pnm(aal::apply_policy(source, policy, rng), dir / name);
    }
    std::cout << "wrote " << samples << " samples to " << dir.string() << "\n";
    return 0;
}

int cmd_plot(const std::vector<std::string>& inputs, const std::string& out) {
    std::vector<aal::TrainingRecord> records;
    for (const fs::path p : inputs) {
        const auto file = fs::is_directory(p) ? p / "record.json" : p;
        std::ifstream in(file);
        if (!in) {
            throw aal::LoadError("cannot read training record " + file.string());
        }
        try {
            records.push_back(aal::record_from_json(nlohmann::json::parse(in)));
        } catch (const nlohmann::json::exception& e) {
            throw aal::ParseError("training record " + file.string() + ": " + e.what());
        }
    }
    std::cout << aal::emit_plots(records, out).string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot meta-learning with augmented unsupervised episodes"};
    app.require_subcommand(1);

    auto* train = app.add_subcommand("train", "meta-train, scoring every epoch on the validation bank");
    ExperimentFlags train_flags(train);

    auto* test = app.add_subcommand("test", "evaluate a checkpoint on supervised test (or validation) episodes");
    ExperimentFlags test_flags(test);
    std::string checkpoint;
    int test_episodes = 0;
    std::string split = "test";
    std::string format = "csv";
    std::string results;
    test->add_option("--checkpoint", checkpoint, "checkpoint file (default: <out>/best.ckpt)");
    test->add_option("--episodes", test_episodes, "episodes per evaluation seed (default: from config)");
    test->add_option("--split", split, "test or val")->check(CLI::IsMember({"test", "val"}));
    test->add_option("--format", format, "csv or markdown");
    test->add_option("--results", results, "also write the table to this file");

    auto* ablate = app.add_subcommand("ablate", "train and test one run per augmentation policy");
    ExperimentFlags ablate_flags(ablate);
    std::vector<std::string> policies;
    ablate->add_option("--policies", policies, "comma-separated policies (default: the dataset's ablation rows)")
        ->delimiter(',');
    ablate->add_option("--format", format, "csv or markdown");

    auto* episodes = app.add_subcommand("episodes", "episode utilities");
    episodes->require_subcommand(1);
    auto* episodes_dump = episodes->add_subcommand("dump", "write episodes as images plus labels.csv");
    ExperimentFlags episodes_flags(episodes_dump);
    std::string episode_split = "train";
    int episode_count = 4;
    episodes_dump->add_option("--split", episode_split, "train (unsupervised), val or test")
        ->check(CLI::IsMember({"train", "val", "test"}));
    episodes_dump->add_option("--count", episode_count, "number of episodes")->check(CLI::PositiveNumber);

    auto* policy = app.add_subcommand("policy", "augmentation policy utilities");
    policy->require_subcommand(1);
    auto* policy_dump = policy->add_subcommand("dump", "print a policy's operators and optionally sample it");
    ExperimentFlags policy_flags(policy_dump);
    int samples = 0;
    int index = 0;
    policy_dump->add_option("--samples", samples, "augmented copies of one training image to write under --out");
    policy_dump->add_option("--index", index, "training image to augment");

    auto* plot = app.add_subcommand("plot", "plot validation curves from record.json files or run directories");
    std::vector<std::string> plot_inputs;
    std::string plot_out = ".";
    plot->add_option("records", plot_inputs, "record.json files or run directories")->required();
    plot->add_option("--out", plot_out, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) {
            return cmd_train(train_flags);
        }
        if (*test) {
            return cmd_test(test_flags, checkpoint, test_episodes, split, format, results);
        }
        if (*ablate) {
            return cmd_ablate(ablate_flags, policies, format);
        }
        if (*episodes_dump) {
            return cmd_episodes_dump(episodes_flags, episode_split, episode_count);
        }
        if (*policy_dump) {
            return cmd_policy_dump(policy_flags, samples, index);
        }
        if (*plot) {
            return cmd_plot(plot_inputs, plot_out);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
