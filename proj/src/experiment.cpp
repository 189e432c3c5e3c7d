#include "mtseg/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace mtseg {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kAnnotatedIndexBase = 0;
constexpr std::uint64_t kTestIndexBase = 1'000'000;
constexpr std::uint64_t kUnannotatedIndexBase = 2'000'000;

std::string step_name(std::int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step-%06lld.mtck", static_cast<long long>(step));
    return buf;
}

MetricsRow to_metrics_row(const StepRecord& r) {
    MetricsRow m;
    m.step = r.step;
    m.ls = r.ls;
    m.lc = r.lc;
    m.beta = r.beta;
    m.alpha = r.alpha;
    m.student_train_dice = r.student_train_dice.value_or(std::nan(""));
    m.teacher_train_dice = r.teacher_train_dice.value_or(std::nan(""));
    return m;
}

LoadedDataset load_manifest_file(const fs::path& manifest) {
    return load_dataset(read_manifest(manifest), manifest.parent_path());
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
    synth.validate();
    train.validate();
    if (dataset.annotated_train < 1) {
        throw ConfigError("dataset.annotated_train must be >= 1 (pretraining needs annotated volumes)");
    }
    if (dataset.unannotated < 0) throw ConfigError("dataset.unannotated must be >= 0");
    if (dataset.test < 1) throw ConfigError("dataset.test must be >= 1");
    const Shape3 out = check_geometry(train.backbone).output;
    for (int a = 0; a < 3; ++a) {
        if (out[a] > synth.volume_shape[a]) {
            throw ConfigError("backbone output " + to_string(out) + " exceeds volume shape " +
                              to_string(synth.volume_shape));
        }
    }
    if (checkpoint_every < 1) throw ConfigError("training.checkpoint_every must be >= 1");
    if (sweep_counts.empty()) throw ConfigError("sweep.annotated_counts must not be empty");
    for (int c : sweep_counts) {
        if (c < 1) throw ConfigError("sweep.annotated_counts entries must be >= 1");
    }
}

Json to_json(const ExperimentConfig& c) {
    const TrainConfig& t = c.train;
    return {
        {"format", kConfigFormat},
        {"version", kConfigVersion},
        {"seed", t.seed},
        {"mode", to_string(t.mode)},
        {"synth", to_json(c.synth)},
        {"dataset",
         {{"annotated_train", c.dataset.annotated_train},
          {"unannotated", c.dataset.unannotated},
          {"test", c.dataset.test}}},
        {"backbone", to_json(t.backbone)},
        {"lo_res_mode", to_string(t.lo_res_mode)},
        {"noise", {{"additive_std", t.noise.additive_std}, {"multiplicative_std", t.noise.multiplicative_std}}},
        {"optimizer",
         {{"learning_rate", t.optimizer.learning_rate},
          {"decay_rate", t.optimizer.decay_rate},
          {"epsilon", t.optimizer.epsilon}}},
        {"schedule",
         {{"ramp_length", t.ramp.ramp_length},
          {"ema_ramp_length", t.ema.ramp_length},
          {"alpha_rampup", t.ema.alpha_rampup},
          {"alpha_after", t.ema.alpha_after}}},
        {"batch", {{"annotated", t.batch_annotated}, {"unannotated", t.batch_unannotated}}},
        {"training",
         {{"pretrain_steps", t.pretrain_steps},
          {"total_steps", t.total_steps},
          {"monitor_every", t.monitor_every},
          {"monitor_volumes", t.monitor_volumes},
          {"pseudo_label_refresh_every", t.pseudo_label_refresh_every},
          {"checkpoint_every", c.checkpoint_every},
          {"inference_threads", t.inference_threads}}},
        {"consistency", {{"include_background", t.consistency.include_background}}},
        {"sweep", {{"annotated_counts", c.sweep_counts}}},
    };
}

ExperimentConfig experiment_config_from_json(const Json& j) {
    ExperimentConfig c;
    TrainConfig& t = c.train;
    StrictObject o(j, "config");

    std::string format = kConfigFormat;
    int version = kConfigVersion;
    o.get("format", format);
    o.get("version", version);
    if (format != kConfigFormat) throw ConfigError("config.format: expected '" + std::string(kConfigFormat) + "'");
    if (version != kConfigVersion) {
        throw ConfigError("config.version: unsupported version " + std::to_string(version));
    }

    o.get("seed", t.seed);
    std::string mode = to_string(t.mode);
    o.get("mode", mode);
    t.mode = train_mode_from_string(mode);
    c.synth = synth_config_from_json(o.child("synth"), "config.synth");

    {
        StrictObject d(o.child("dataset"), "config.dataset");
        d.get("annotated_train", c.dataset.annotated_train);
        d.get("unannotated", c.dataset.unannotated);
        d.get("test", c.dataset.test);
        d.finish();
    }
    t.backbone = backbone_config_from_json(o.child("backbone"), "config.backbone");
    std::string lo = to_string(t.lo_res_mode);
    o.get("lo_res_mode", lo);
    t.lo_res_mode = lo_res_mode_from_string(lo);
    {
        StrictObject n(o.child("noise"), "config.noise");
        n.get("additive_std", t.noise.additive_std);
        n.get("multiplicative_std", t.noise.multiplicative_std);
        n.finish();
    }
    {
        StrictObject p(o.child("optimizer"), "config.optimizer");
        p.get("learning_rate", t.optimizer.learning_rate);
        p.get("decay_rate", t.optimizer.decay_rate);
        p.get("epsilon", t.optimizer.epsilon);
        p.finish();
    }
    {
        StrictObject s(o.child("schedule"), "config.schedule");
        s.get("ramp_length", t.ramp.ramp_length);
        s.get("ema_ramp_length", t.ema.ramp_length);
        s.get("alpha_rampup", t.ema.alpha_rampup);
        s.get("alpha_after", t.ema.alpha_after);
        s.finish();
    }
    {
        StrictObject b(o.child("batch"), "config.batch");
        b.get("annotated", t.batch_annotated);
        b.get("unannotated", t.batch_unannotated);
        b.finish();
    }
    {
        StrictObject r(o.child("training"), "config.training");
        r.get("pretrain_steps", t.pretrain_steps);
        r.get("total_steps", t.total_steps);
        r.get("monitor_every", t.monitor_every);
        r.get("monitor_volumes", t.monitor_volumes);
        r.get("pseudo_label_refresh_every", t.pseudo_label_refresh_every);
        r.get("checkpoint_every", c.checkpoint_every);
        r.get("inference_threads", t.inference_threads);
        r.finish();
    }
    {
        StrictObject k(o.child("consistency"), "config.consistency");
        k.get("include_background", t.consistency.include_background);
        k.finish();
    }
    {
        StrictObject w(o.child("sweep"), "config.sweep");
        w.get("annotated_counts", c.sweep_counts);
        w.finish();
    }
    o.finish();
    c.validate();
    return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    Json j;
    try {
        j = Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return experiment_config_from_json(j);
}

void save_experiment_config(const fs::path& path, const ExperimentConfig& c) {
    write_file_atomic(path, to_json(c).dump(2) + "\n");
}

void prepare_output_dir(const fs::path& dir, bool force) {
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw ConfigError(dir.string() + " exists and is not a directory");
        if (!fs::is_empty(dir) && !force) {
            throw ConfigError("output directory " + dir.string() + " is not empty (use --force to overwrite)");
        }
    }
    fs::create_directories(dir);
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

GenerateSummary cmd_generate(const ExperimentConfig& cfg, const fs::path& out_dir, bool force, std::ostream& log) {
    cfg.validate();
    prepare_output_dir(out_dir, force);
    fs::create_directories(out_dir / "volumes");
    fs::create_directories(out_dir / "labels");

    auto emit = [&](const std::string& id, std::uint64_t index, bool with_labels) {
        auto [raw, labels] = generate_volume(cfg.synth, index);
        write_volume(out_dir / "volumes" / (id + ".mtsv"), normalize_intensity(raw));
        if (with_labels) write_label_map(out_dir / "labels" / (id + ".mtsl"), labels);
        return AnnotatedEntry{"volumes/" + id + ".mtsv", with_labels ? "labels/" + id + ".mtsl" : ""};
    };
    auto id_for = [](const char* prefix, int i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%s%03d", prefix, i);
        return std::string(buf);
    };

    DatasetManifest train;
    train.split = Split::train;
    train.generator_config = cfg.synth;
    for (int i = 0; i < cfg.dataset.annotated_train; ++i) {
        train.annotated.push_back(emit(id_for("train", i), kAnnotatedIndexBase + i, true));
    }
    for (int i = 0; i < cfg.dataset.unannotated; ++i) {
        train.unannotated.push_back(emit(id_for("unlabelled", i), kUnannotatedIndexBase + i, false).volume_path);
    }
    DatasetManifest test;
    test.split = Split::test;
    test.generator_config = cfg.synth;
    for (int i = 0; i < cfg.dataset.test; ++i) {
        test.annotated.push_back(emit(id_for("test", i), kTestIndexBase + i, true));
    }

    GenerateSummary s;
    s.train_manifest = out_dir / kTrainManifest;
    s.test_manifest = out_dir / kTestManifest;
    write_manifest(s.train_manifest, train);
    write_manifest(s.test_manifest, test);
    save_experiment_config(out_dir / "config.json", cfg);
    s.annotated_train = cfg.dataset.annotated_train;
    s.unannotated = cfg.dataset.unannotated;
    s.test = cfg.dataset.test;
    log << "generated " << s.annotated_train << " annotated training, " << s.unannotated << " unannotated and "
        << s.test << " annotated test volumes in " << out_dir.string() << "\n";
    return s;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

TrainRunSummary cmd_train(const ExperimentConfig& cfg, const fs::path& data_dir, const fs::path& out_dir,
                          bool force, const std::optional<fs::path>& resume, std::ostream& log) {
    cfg.validate();
    LoadedDataset data = load_manifest_file(data_dir / kTrainManifest);
    if (data.annotated.empty()) throw ConfigError("training manifest lists no annotated volumes");

    const Trainer trainer(cfg.train);
    const TrainConfig& tc = trainer.config();
    std::optional<TrainState> state;
    if (resume) {
        state = load_checkpoint(*resume);
        require_same_schema(state->student, trainer.backbone().init_weights());
        if (tc.mode == TrainMode::supervised_only) {
            throw ConfigError("--resume applies to Mean Teacher runs; supervised-only runs have no MT loop");
        }
        if (state->ramp.ramp_length != tc.ramp.ramp_length || state->ema.ramp_length != tc.ema.ramp_length ||
            state->ema.alpha_rampup != tc.ema.alpha_rampup || state->ema.alpha_after != tc.ema.alpha_after) {
            throw ConfigError("checkpoint schedules differ from the configuration");
        }
        fs::create_directories(out_dir);
    } else {
        prepare_output_dir(out_dir, force);
    }
    fs::create_directories(out_dir / "checkpoints");
    save_experiment_config(out_dir / "config.json", cfg);

    TrainRunSummary summary;
    summary.metrics_csv = out_dir / "metrics.csv";
    summary.final_checkpoint = out_dir / "final.mtck";

    if (!state) {
        log << "pretraining for " << tc.pretrain_steps << " steps on " << data.annotated.size()
            << " annotated volumes\n";
        const PretrainResult pre = trainer.pretrain(data.annotated);
        std::vector<MetricsRow> rows;
        for (const auto& r : pre.history) rows.push_back(to_metrics_row(r));
        fs::remove(out_dir / "pretrain.csv");
        append_metrics_csv(out_dir / "pretrain.csv", rows);
        state = trainer.initial_state(pre);
        save_checkpoint(*state, out_dir / "pretrained.mtck");
        fs::remove(summary.metrics_csv);
        if (tc.mode == TrainMode::supervised_only) {
            save_checkpoint(*state, summary.final_checkpoint);
            log << "supervised-only run: wrote " << summary.final_checkpoint.string() << "\n";
            return summary;
        }
    } else {
        log << "resuming from " << resume->string() << " at step " << state->step << "\n";
        std::vector<MetricsRow> kept;
        if (fs::exists(summary.metrics_csv)) {
            for (const auto& r : read_metrics_csv(summary.metrics_csv)) {
                if (r.step <= state->step) kept.push_back(r);
            }
            fs::remove(summary.metrics_csv);
        }
        append_metrics_csv(summary.metrics_csv, kept);
    }

    if (tc.batch_unannotated > 0 && data.unannotated.empty()) {
        throw ConfigError("Mean Teacher training needs unannotated volumes (or batch.unannotated = 0)");
    }
    trainer.refresh_pseudo_labels(data.unannotated, state->pseudo_label_source);

    TrainHooks hooks;
    hooks.on_step = [&](const TrainState& s, const StepRecord& r) {
        append_metrics_csv(summary.metrics_csv, {to_metrics_row(r)});
        if (r.student_train_dice) {
            log << "step " << r.step << "  L_s " << r.ls << "  L_c " << r.lc << "  beta " << r.beta
                << "  dice student " << *r.student_train_dice << " teacher " << *r.teacher_train_dice << "\n";
        }
        if (s.step % cfg.checkpoint_every == 0) save_checkpoint(s, out_dir / "checkpoints" / step_name(s.step));
    };
    trainer.run(*state, data.annotated, data.unannotated, tc.total_steps, hooks);
    save_checkpoint(*state, summary.final_checkpoint);
    summary.final_step = state->step;
    if (fs::exists(summary.metrics_csv) && !read_metrics_csv(summary.metrics_csv).empty()) {
        plot_training_curves(summary.metrics_csv, out_dir / "curves", tc.ramp.ramp_length);
    }
    log << "finished at step " << state->step << ": wrote " << summary.final_checkpoint.string() << "\n";
    return summary;
}

// ---------------------------------------------------------------------------
// evaluate / compare
// ---------------------------------------------------------------------------

std::string to_string(WeightChoice w) { return w == WeightChoice::teacher ? "teacher" : "student"; }

WeightChoice weight_choice_from_string(const std::string& s) {
    if (s == "teacher") return WeightChoice::teacher;
    if (s == "student") return WeightChoice::student;
    throw ConfigError("unknown weights '" + s + "' (expected teacher or student)");
}

EvaluationSummary cmd_evaluate(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& test_manifest,
                               const fs::path& out_dir, const std::string& method, WeightChoice weights,
                               int threads, bool force, std::ostream& log) {
    if (!fs::exists(checkpoint)) throw CheckpointError("checkpoint " + checkpoint.string() + " does not exist");
    const TrainState state = load_checkpoint(checkpoint);
    const Backbone net(cfg.train.backbone);
    const ModelWeights& w = weights == WeightChoice::teacher ? state.teacher : state.student;
    if (w.schema_id() != net.schema_id()) {
        throw SchemaError("checkpoint weights do not match the configured backbone");
    }
    const LoadedDataset test = load_manifest_file(test_manifest);
    if (test.annotated.empty()) throw SampleSizeError("test manifest lists no annotated volumes");
    prepare_output_dir(out_dir, force);
    EvaluationSummary s = evaluate_model(net, w, test.annotated, method, cfg.train.lo_res_mode, threads);
    write_scan_results_csv(out_dir / "scans.csv", s);
    write_summary_csv(out_dir / "summary.csv", {s});
    log << method << " (" << to_string(weights) << " weights, step " << state.step << "): Dice "
        << format_mean_std(s.dice) << " over " << s.scans.size() << " scans\n";
    return s;
}

ComparisonReport cmd_compare(const std::vector<std::string>& inputs, const std::optional<fs::path>& out_dir,
                             bool force, std::ostream& log) {
    if (inputs.size() < 2) throw SampleSizeError("compare needs at least two result files");
    std::vector<EvaluationSummary> summaries;
    for (const auto& in : inputs) {
        std::string name;
        fs::path path;
        if (const auto eq = in.find('='); eq != std::string::npos) {
            name = in.substr(0, eq);
            path = in.substr(eq + 1);
        } else {
            path = in;
            if (fs::is_directory(path)) path /= "scans.csv";
            name = fs::absolute(path).parent_path().filename().string();
        }
        if (fs::is_directory(path)) path /= "scans.csv";
        summaries.push_back(read_scan_results_csv(path, name));
    }
    ComparisonReport r = compare_runs(summaries);
    const std::string table = r.render_table();
    log << table;
    if (out_dir) {
        prepare_output_dir(*out_dir, force);
        write_comparison_csv(*out_dir / "comparison.csv", r);
        write_summary_csv(*out_dir / "summary.csv", r.methods);
        write_file_atomic(*out_dir / "table.txt", table);
    }
    return r;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

std::string SweepReport::render_table() const {
    std::ostringstream os;
    os << std::left << std::setw(12) << "annotated" << std::setw(20) << "supervised-only" << std::setw(20)
       << "mean-teacher" << "p\n";
    for (const auto& c : cells) {
        std::string mt = format_mean_std(c.mean_teacher.dice);
        if (c.test.p < kSignificanceLevel) mt += " *";
        std::ostringstream p;
        p << std::setprecision(4) << c.test.p;
        os << std::left << std::setw(12) << c.annotated_count << std::setw(20) << format_mean_std(c.baseline.dice)
           << std::setw(20) << mt << p.str() << "\n";
    }
    os << "* p < " << kSignificanceLevel << " (paired t-test against supervised-only)\n";
    return os.str();
}

SweepReport cmd_sweep(const ExperimentConfig& cfg, const fs::path& data_dir, const fs::path& out_dir, bool force,
                      std::ostream& log) {
    cfg.validate();
    const LoadedDataset train = load_manifest_file(data_dir / kTrainManifest);
    const LoadedDataset test = load_manifest_file(data_dir / kTestManifest);
    std::vector<int> counts = cfg.sweep_counts;
    std::sort(counts.begin(), counts.end());
    counts.erase(std::unique(counts.begin(), counts.end()), counts.end());
    if (static_cast<std::size_t>(counts.back()) > train.annotated.size()) {
        throw ConfigError("sweep needs " + std::to_string(counts.back()) + " annotated volumes but the dataset has " +
                          std::to_string(train.annotated.size()));
    }
    prepare_output_dir(out_dir, force);
    save_experiment_config(out_dir / "config.json", cfg);

    TrainConfig tc = cfg.train;
    tc.mode = TrainMode::mean_teacher;
    const Trainer trainer(tc);
    SweepReport report;
    for (int count : counts) {
        const std::vector<AnnotatedSample> subset(train.annotated.begin(), train.annotated.begin() + count);
        std::vector<UnannotatedSample> pool = train.unannotated;
        log << "annotated = " << count << ": pretraining\n";
        const PretrainResult pre = trainer.pretrain(subset);
        log << "annotated = " << count << ": Mean Teacher\n";
        const TrainResult mt = trainer.train_from(pre, subset, pool);

        SweepCell cell;
        cell.annotated_count = count;
        cell.baseline = evaluate_model(trainer.backbone(), pre.weights, test.annotated, "supervised-only",
                                       tc.lo_res_mode, tc.inference_threads);
        cell.mean_teacher = evaluate_model(trainer.backbone(), mt.teacher, test.annotated, "mean-teacher",
                                           tc.lo_res_mode, tc.inference_threads);
        cell.test = paired_t_test(cell.mean_teacher.dice_values(), cell.baseline.dice_values());

        const fs::path cell_dir = out_dir / ("annotated-" + std::to_string(count));
        fs::create_directories(cell_dir / "supervised-only");
        fs::create_directories(cell_dir / "mean-teacher");
        write_scan_results_csv(cell_dir / "supervised-only" / "scans.csv", cell.baseline);
        write_scan_results_csv(cell_dir / "mean-teacher" / "scans.csv", cell.mean_teacher);
        std::vector<MetricsRow> rows;
        for (const auto& r : mt.history) rows.push_back(to_metrics_row(r));
        append_metrics_csv(cell_dir / "metrics.csv", rows);
        log << "annotated = " << count << ": supervised-only " << format_mean_std(cell.baseline.dice)
            << ", mean-teacher " << format_mean_std(cell.mean_teacher.dice) << "\n";
        report.cells.push_back(std::move(cell));
    }

    std::ostringstream csv;
    csv << "annotated,method,n,mean,std\n" << std::setprecision(17);
    for (const auto& c : report.cells) {
        for (const EvaluationSummary* s : {&c.baseline, &c.mean_teacher}) {
            csv << c.annotated_count << "," << s->method << "," << s->scans.size() << "," << s->dice.mean << ","
                << s->dice.std << "\n";
        }
    }
    write_file_atomic(out_dir / "sweep.csv", csv.str());
    const std::string table = report.render_table();
    write_file_atomic(out_dir / "sweep.txt", table);
    log << table;
    return report;
}

}  // namespace mtseg
