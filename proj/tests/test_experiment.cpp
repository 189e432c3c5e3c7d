#include <doctest.h>

#include <fstream>
#include <sstream>

#include "mtseg/experiment.hpp"
#include "test_support.hpp"

using namespace mtseg;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_experiment() {
    ExperimentConfig c;
    c.synth = testing::small_synth();
    c.dataset = {2, 3, 2};
    c.train.backbone = testing::tiny_backbone();
    c.train.batch_annotated = 2;
    c.train.batch_unannotated = 2;
    c.train.pretrain_steps = 4;
    c.train.total_steps = 10;
    c.train.monitor_every = 5;
    c.train.monitor_volumes = 1;
    c.checkpoint_every = 5;
    c.sweep_counts = {2, 1};
    return c;
}

}  // namespace

TEST_CASE("default configuration carries the documented constants") {
    const ExperimentConfig c;
    CHECK(c.train.noise.additive_std == 0.05);
    CHECK(c.train.noise.multiplicative_std == 0.01);
    CHECK(c.train.ema.alpha_rampup == 0.99);
    CHECK(c.train.ema.alpha_after == 0.999);
    CHECK(c.train.ramp.ramp_length == 400);
    CHECK(c.train.batch_annotated == 8);
    CHECK(c.train.batch_unannotated == 8);
    CHECK(c.train.optimizer.learning_rate == 1e-4);
    CHECK(c.train.optimizer.decay_rate == 0.9);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("configuration JSON round-trips and rejects unknown keys") {
    const ExperimentConfig c = tiny_experiment();
    const Json j = to_json(c);
    const ExperimentConfig back = experiment_config_from_json(j);
    CHECK(to_json(back) == j);

    Json typo = j;
    typo["training"]["pretrain_step"] = 3;
    CHECK_THROWS_AS(experiment_config_from_json(typo), ConfigError);
    Json top = j;
    top["learning_rate"] = 0.1;
    CHECK_THROWS_AS(experiment_config_from_json(top), ConfigError);
    Json wrong_type = j;
    wrong_type["batch"]["annotated"] = "eight";
    CHECK_THROWS_AS(experiment_config_from_json(wrong_type), ConfigError);
    Json bad_mode = j;
    bad_mode["mode"] = "teacher-only";
    CHECK_THROWS_AS(experiment_config_from_json(bad_mode), ConfigError);
    Json bad_geometry = j;
    bad_geometry["backbone"]["lo_patch"] = Json::array({4, 5, 3});
    CHECK_THROWS_AS(experiment_config_from_json(bad_geometry), ConfigError);

    // Partial documents keep defaults.
    const ExperimentConfig partial = experiment_config_from_json(Json::parse(R"({"seed": 9})"));
    CHECK(partial.train.seed == 9);
    CHECK(partial.dataset.unannotated == ExperimentConfig{}.dataset.unannotated);
}

namespace {

// Every key the writer emits must be declared in the published schema.
void check_declared(const Json& value, const Json& schema, const Json& root, const std::string& where) {
    const Json* node = &schema;
    while (node->contains("$ref")) {
        const std::string ref = (*node)["$ref"].get<std::string>();
        node = &root["$defs"][ref.substr(ref.rfind('/') + 1)];
    }
    if (!value.is_object()) return;
    REQUIRE_MESSAGE(node->contains("properties"), where);
    for (const auto& [key, child] : value.items()) {
        INFO((where + "." + key));
        REQUIRE((*node)["properties"].contains(key));
        check_declared(child, (*node)["properties"][key], root, where + "." + key);
    }
}

}  // namespace

TEST_CASE("published schema declares every configuration key") {
    std::ifstream in(std::string(MTSEG_SOURCE_DIR) + "/schema/experiment.schema.json");
    REQUIRE(in);
    const Json schema = Json::parse(in);
    check_declared(to_json(ExperimentConfig{}), schema, schema, "config");
}

TEST_CASE("generate: counts, determinism and guarded output directory") {
    testing::TempDir dir("gen");
    std::ostringstream log;
    const ExperimentConfig c = tiny_experiment();
    const GenerateSummary s = cmd_generate(c, dir / "a", false, log);
    CHECK(s.annotated_train == 2);
    CHECK(log.str().find("2 annotated training, 3 unannotated and 2 annotated test") != std::string::npos);
    const DatasetManifest train = read_manifest(s.train_manifest);
    const DatasetManifest test = read_manifest(s.test_manifest);
    CHECK(train.annotated.size() == 2);
    CHECK(train.unannotated.size() == 3);
    CHECK(test.annotated.size() == 2);
    CHECK(test.split == Split::test);

    CHECK_THROWS_AS(cmd_generate(c, dir / "a", false, log), ConfigError);
    CHECK_NOTHROW(cmd_generate(c, dir / "a", true, log));
    cmd_generate(c, dir / "b", false, log);
    for (const auto& e : train.annotated) {
        CHECK(read_file(dir / "a" / e.volume_path) == read_file(dir / "b" / e.volume_path));
        CHECK(read_file(dir / "a" / e.label_path) == read_file(dir / "b" / e.label_path));
    }

    ExperimentConfig none = c;
    none.dataset.annotated_train = 0;
    CHECK_THROWS_AS(cmd_generate(none, dir / "c", false, log), ConfigError);
}

TEST_CASE("train, resume, evaluate and compare end to end") {
    testing::TempDir dir("e2e");
    std::ostringstream log;
    ExperimentConfig c = tiny_experiment();
    cmd_generate(c, dir / "data", false, log);

    const TrainRunSummary full = cmd_train(c, dir / "data", dir / "full", false, std::nullopt, log);
    CHECK(full.final_step == 10);
    CHECK(fs::exists(dir / "full/pretrained.mtck"));
    CHECK(fs::exists(dir / "full/checkpoints/step-000005.mtck"));
    CHECK(fs::exists(dir / "full/curves.svg"));
    CHECK(load_experiment_config(dir / "full/config.json").train.total_steps == 10);

    // Resume in a copy of the run directory from the mid-run checkpoint.
    fs::copy(dir / "full", dir / "resumed", fs::copy_options::recursive);
    const TrainRunSummary resumed = cmd_train(c, dir / "data", dir / "resumed", false,
                                              dir / "resumed/checkpoints/step-000005.mtck", log);
    CHECK(read_file(resumed.final_checkpoint) == read_file(full.final_checkpoint));
    CHECK(read_file(resumed.metrics_csv) == read_file(full.metrics_csv));

    ExperimentConfig baseline_cfg = c;
    baseline_cfg.train.mode = TrainMode::supervised_only;
    const TrainRunSummary base = cmd_train(baseline_cfg, dir / "data", dir / "base", false, std::nullopt, log);
    CHECK(read_file(dir / "base/pretrained.mtck") == read_file(dir / "full/pretrained.mtck"));
    CHECK(load_checkpoint(base.final_checkpoint).step == 0);

    const EvaluationSummary mt = cmd_evaluate(c, full.final_checkpoint, dir / "data/test.json", dir / "eval_mt",
                                              "mt", WeightChoice::teacher, 2, false, log);
    cmd_evaluate(c, base.final_checkpoint, dir / "data/test.json", dir / "eval_base", "base",
                 WeightChoice::teacher, 1, false, log);
    CHECK(mt.scans.size() == 2);
    CHECK(fs::exists(dir / "eval_mt/summary.csv"));
    CHECK_THROWS_AS(cmd_evaluate(c, dir / "nope.mtck", dir / "data/test.json", dir / "x", "m",
                                 WeightChoice::teacher, 1, false, log),
                    CheckpointError);
    ExperimentConfig other = c;
    other.train.backbone = BackboneConfig{};
    CHECK_THROWS_AS(cmd_evaluate(other, full.final_checkpoint, dir / "data/test.json", dir / "y", "m",
                                 WeightChoice::teacher, 1, false, log),
                    SchemaError);

    const ComparisonReport r = cmd_compare({"base=" + (dir / "eval_base/scans.csv").string(),
                                            (dir / "eval_mt").string()},
                                           dir / "cmp", false, log);
    REQUIRE(r.methods.size() == 2);
    CHECK(r.methods[1].method == "eval_mt");
    CHECK(fs::exists(dir / "cmp/comparison.csv"));
    CHECK(fs::exists(dir / "cmp/table.txt"));
    CHECK_THROWS_AS(cmd_compare({(dir / "eval_mt").string()}, std::nullopt, false, log), SampleSizeError);
}

TEST_CASE("sweep produces a sorted grid") {
    testing::TempDir dir("sweep");
    std::ostringstream log;
    ExperimentConfig c = tiny_experiment();
    cmd_generate(c, dir / "data", false, log);
    const SweepReport r = cmd_sweep(c, dir / "data", dir / "sweep", false, log);
    REQUIRE(r.cells.size() == 2);
    CHECK(r.cells[0].annotated_count == 1);
    CHECK(r.cells[1].annotated_count == 2);
    for (const auto& cell : r.cells) {
        CHECK(cell.baseline.method == "supervised-only");
        CHECK(cell.mean_teacher.method == "mean-teacher");
        CHECK(cell.baseline.scans.size() == 2);
    }
    CHECK(fs::exists(dir / "sweep/sweep.csv"));
    CHECK(r.render_table().find("annotated") != std::string::npos);

    c.sweep_counts = {5};
    CHECK_THROWS_AS(cmd_sweep(c, dir / "data", dir / "sweep2", false, log), ConfigError);
}
