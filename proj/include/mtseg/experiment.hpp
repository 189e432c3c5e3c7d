#pragma once

// Experiment configuration and the end-to-end commands behind the CLI:
// generate a synthetic cohort, train, evaluate, compare and sweep.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mtseg/evaluation.hpp"
#include "mtseg/json_io.hpp"
#include "mtseg/synthdata.hpp"
#include "mtseg/trainer.hpp"

namespace mtseg {

struct DatasetCounts {
    int annotated_train = 4;
    int unannotated = 40;
    int test = 12;
};

struct ExperimentConfig {
    SynthConfig synth;
    DatasetCounts dataset;
    TrainConfig train;
    std::int64_t checkpoint_every = 100;
    std::vector<int> sweep_counts{2, 4, 8};

    void validate() const;
};

inline constexpr const char* kConfigFormat = "mtseg-experiment";
inline constexpr int kConfigVersion = 1;

Json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const Json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
void save_experiment_config(const std::filesystem::path& path, const ExperimentConfig& c);

// Creates `dir`, or accepts an existing empty one. A non-empty directory
// raises ConfigError unless `force` is set.
void prepare_output_dir(const std::filesystem::path& dir, bool force);

inline constexpr const char* kTrainManifest = "train.json";
inline constexpr const char* kTestManifest = "test.json";

struct GenerateSummary {
    std::filesystem::path train_manifest;
    std::filesystem::path test_manifest;
    int annotated_train = 0;
    int unannotated = 0;
    int test = 0;
};

// Writes normalised volumes, label maps, train.json, test.json and config.json.
GenerateSummary cmd_generate(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, bool force,
                             std::ostream& log);

struct TrainRunSummary {
    std::filesystem::path final_checkpoint;
    std::filesystem::path metrics_csv;
    std::int64_t final_step = 0;
};

// Run directory layout: config.json, pretrain.csv, metrics.csv,
// pretrained.mtck, checkpoints/step-NNNNNN.mtck, final.mtck, curves.svg/csv.
// With `resume`, training continues from that checkpoint and metrics rows
// past its step are replaced.
TrainRunSummary cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& data_dir,
                          const std::filesystem::path& out_dir, bool force,
                          const std::optional<std::filesystem::path>& resume, std::ostream& log);

enum class WeightChoice { teacher, student };

std::string to_string(WeightChoice w);
WeightChoice weight_choice_from_string(const std::string& s);

// Writes scans.csv and summary.csv into out_dir.
EvaluationSummary cmd_evaluate(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                               const std::filesystem::path& test_manifest, const std::filesystem::path& out_dir,
                               const std::string& method, WeightChoice weights, int threads, bool force,
                               std::ostream& log);

// Each input is "name=path/to/scans.csv" or a bare path, in which case the
// method name is the name of the directory holding the file.
ComparisonReport cmd_compare(const std::vector<std::string>& inputs,
                             const std::optional<std::filesystem::path>& out_dir, bool force, std::ostream& log);

struct SweepCell {
    int annotated_count = 0;
    EvaluationSummary baseline;
    EvaluationSummary mean_teacher;
    TTestResult test;
};

struct SweepReport {
    std::vector<SweepCell> cells;  // sorted by annotated count

    [[nodiscard]] std::string render_table() const;
};

// For each count, uses the first `count` annotated training volumes with the
// shared unannotated pool, trains the supervised-only baseline and Mean
// Teacher from one shared pretraining run, and evaluates both on the test set.
SweepReport cmd_sweep(const ExperimentConfig& cfg, const std::filesystem::path& data_dir,
                      const std::filesystem::path& out_dir, bool force, std::ostream& log);

}  // namespace mtseg
