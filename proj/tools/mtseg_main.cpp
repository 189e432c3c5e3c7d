// mtseg: synthetic-cohort Mean Teacher lesion segmentation experiments.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mtseg/experiment.hpp"

namespace fs = std::filesystem;
using namespace mtseg;

namespace {

enum ExitCode : int {
    kOk = 0,
    kUnexpected = 1,
    kConfig = 2,
    kData = 3,
    kDivergence = 4,
    kEvaluation = 5,
};

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const DivergenceError*>(&e)) return kDivergence;
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const GeometryError*>(&e)) return kConfig;
    if (dynamic_cast<const SampleSizeError*>(&e) || dynamic_cast<const PairingError*>(&e) ||
        dynamic_cast<const SchemaError*>(&e)) {
        return kEvaluation;
    }
    if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const CheckpointError*>(&e) ||
        dynamic_cast<const InvalidLabelError*>(&e) || dynamic_cast<const ShapeError*>(&e) ||
        dynamic_cast<const DegenerateMaskError*>(&e) || dynamic_cast<const DegenerateIntensityError*>(&e) ||
        dynamic_cast<const PreconditionError*>(&e)) {
        return kData;
    }
    return kUnexpected;
}

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string mode;
    std::string out;
    bool force = false;
};

ExperimentConfig resolve_config(const CommonOptions& o, bool seed_is_data_seed) {
    ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_experiment_config(o.config);
    if (o.seed) {
        if (seed_is_data_seed) {
            cfg.synth.seed = *o.seed;
        } else {
            cfg.train.seed = *o.seed;
        }
    }
    if (!o.mode.empty()) cfg.train.mode = train_mode_from_string(o.mode);
    cfg.validate();
    return cfg;
}

// Falls back to the config echo stored next to a checkpoint.
ExperimentConfig config_for_checkpoint(const CommonOptions& o, const fs::path& checkpoint) {
    if (!o.config.empty()) return resolve_config(o, false);
    for (fs::path dir = fs::absolute(checkpoint).parent_path(); !dir.empty(); dir = dir.parent_path()) {
        if (fs::exists(dir / "config.json")) return load_experiment_config(dir / "config.json");
        if (dir == dir.parent_path()) break;
        if (dir.filename() != "checkpoints") break;
    }
    return ExperimentConfig{};
}

void add_common(CLI::App* cmd, CommonOptions& o, bool with_mode, const std::string& seed_help) {
    cmd->add_option("--config", o.config, "experiment configuration (JSON)")->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, seed_help);
    if (with_mode) {
        cmd->add_option("--mode", o.mode, "training mode")
            ->check(CLI::IsMember({"supervised-only", "mean-teacher"}));
    }
    cmd->add_option("--out", o.out, "output directory")->required();
    cmd->add_flag("--force", o.force, "overwrite a non-empty output directory");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mean Teacher semi-supervised lesion segmentation on synthetic volumes"};
    app.require_subcommand(1);

    CommonOptions gen_opts;
    auto* gen = app.add_subcommand("generate", "write a synthetic cohort with train/test manifests");
    add_common(gen, gen_opts, false, "generator seed (overrides synth.seed)");

    CommonOptions train_opts;
    std::string train_data;
    std::string resume;
    auto* train = app.add_subcommand("train", "pretrain, then run the Mean Teacher loop");
    add_common(train, train_opts, true, "training seed");
    train->add_option("--data", train_data, "dataset directory written by generate")->required();
    train->add_option("--resume", resume, "continue from a checkpoint")->check(CLI::ExistingFile);

    CommonOptions eval_opts;
    std::string checkpoint;
    std::string test_manifest;
    std::string method;
    std::string weights = "teacher";
    auto* evaluate = app.add_subcommand("evaluate", "hard Dice of a checkpoint on the test manifest");
    add_common(evaluate, eval_opts, false, "unused; accepted for symmetry");
    evaluate->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    evaluate->add_option("--test", test_manifest, "test manifest (test.json)")->required();
    evaluate->add_option("--method", method, "method name recorded in the results");
    evaluate->add_option("--weights", weights, "weights to evaluate")->check(CLI::IsMember({"teacher", "student"}));

    std::vector<std::string> compare_inputs;
    std::string compare_out;
    bool compare_force = false;
    auto* compare = app.add_subcommand("compare", "paired t-tests between evaluated methods");
    compare->add_option("results", compare_inputs, "name=scans.csv or run directories")->required();
    compare->add_option("--out", compare_out, "write comparison.csv, summary.csv and table.txt here");
    compare->add_flag("--force", compare_force, "overwrite a non-empty output directory");

    CommonOptions sweep_opts;
    std::string sweep_data;
    std::vector<int> sweep_counts;
    auto* sweep = app.add_subcommand("sweep", "baseline vs Mean Teacher across annotated-set sizes");
    add_common(sweep, sweep_opts, false, "training seed");
    sweep->add_option("--data", sweep_data, "dataset directory written by generate")->required();
    sweep->add_option("--counts", sweep_counts, "annotated counts (overrides sweep.annotated_counts)")
        ->delimiter(',');

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            const ExperimentConfig cfg = resolve_config(gen_opts, true);
            cmd_generate(cfg, gen_opts.out, gen_opts.force, std::cout);
        } else if (*train) {
            const ExperimentConfig cfg = resolve_config(train_opts, false);
            std::optional<fs::path> from;
            if (!resume.empty()) from = resume;
            cmd_train(cfg, train_data, train_opts.out, train_opts.force, from, std::cout);
        } else if (*evaluate) {
            const ExperimentConfig cfg = config_for_checkpoint(eval_opts, checkpoint);
            const int threads = inference_threads_from_env();
            const std::string name =
                method.empty() ? fs::absolute(checkpoint).parent_path().filename().string() : method;
            cmd_evaluate(cfg, checkpoint, test_manifest, eval_opts.out, name, weight_choice_from_string(weights),
                         threads, eval_opts.force, std::cout);
        } else if (*compare) {
            std::optional<fs::path> out;
            if (!compare_out.empty()) out = compare_out;
            cmd_compare(compare_inputs, out, compare_force, std::cout);
        } else if (*sweep) {
            ExperimentConfig cfg = resolve_config(sweep_opts, false);
            if (!sweep_counts.empty()) cfg.sweep_counts = sweep_counts;
            cfg.train.inference_threads = inference_threads_from_env();
            cmd_sweep(cfg, sweep_data, sweep_opts.out, sweep_opts.force, std::cout);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
    return kOk;
}
