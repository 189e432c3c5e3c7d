#pragma once

// Mean Teacher training: supervised pretraining, then alternating student
// updates (supervised cross-entropy on annotated patches plus a ramped soft
// Dice consistency term between noisy student and teacher views of
// unannotated patches) and EMA teacher updates.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mtseg/backbone.hpp"
#include "mtseg/domain.hpp"
#include "mtseg/evaluation.hpp"
#include "mtseg/losses.hpp"
#include "mtseg/synthdata.hpp"

namespace mtseg {

struct NoiseConfig {
    double additive_std = 0.05;       // eta_s ~ N(0, additive_std^2)
    double multiplicative_std = 0.01;  // eta_m ~ N(1, multiplicative_std^2)
};

struct OptimizerConfig {
    double learning_rate = 1e-4;
    double decay_rate = 0.9;
    double epsilon = 1e-8;
};

enum class TrainMode { supervised_only, mean_teacher };

std::string to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& s);

struct TrainConfig {
    BackboneConfig backbone;
    LoResMode lo_res_mode = LoResMode::mean_pool;
    NoiseConfig noise;
    OptimizerConfig optimizer;
    RampSchedule ramp;
    EmaSchedule ema;
    ConsistencyOptions consistency;
    int batch_annotated = 8;
    int batch_unannotated = 8;
    std::int64_t pretrain_steps = 3000;
    std::int64_t total_steps = 600;
    std::int64_t monitor_every = 20;
    int monitor_volumes = 4;
    // 0 keeps the pseudo-lesion maps from the pretrained model for the whole run.
    std::int64_t pseudo_label_refresh_every = 0;
    std::uint64_t seed = 1;
    TrainMode mode = TrainMode::mean_teacher;
    int inference_threads = 1;

    void validate() const;
};

// One student update's scalars, plus monitoring Dice when measured.
struct StepRecord {
    std::int64_t step = 0;  // value of S after the update
    double ls = 0.0;
    double lc = 0.0;
    double beta = 0.0;
    double alpha = 0.0;
    std::optional<double> student_train_dice;
    std::optional<double> teacher_train_dice;
};

struct TrainState {
    std::int64_t step = 0;
    ModelWeights student;
    ModelWeights teacher;
    Gradients optimizer_mean_square;  // RMSProp accumulators for the student
    Rng rng;                          // batch sampling stream
    RampSchedule ramp;
    EmaSchedule ema;
    // Weights that produced the current pseudo-lesion maps.
    ModelWeights pseudo_label_source;
    std::vector<StepRecord> history;
};

struct Batch {
    std::vector<PatchPair> annotated;    // carry target windows
    std::vector<PatchPair> unannotated;  // no targets
};

struct StepOverrides {
    std::optional<double> beta;
    std::optional<double> alpha;
};

struct BatchGradient {
    Gradients student;
    double ls = 0.0;
    double lc = 0.0;
    double beta = 0.0;
};

struct PretrainResult {
    ModelWeights weights;
    Gradients optimizer_mean_square;
    std::vector<StepRecord> history;
};

struct TrainHooks {
    // Called after every (student_step, teacher_step) pair.
    std::function<void(const TrainState&, const StepRecord&)> on_step;
};

struct TrainResult {
    ModelWeights teacher;
    ModelWeights student;
    ModelWeights pretrained;
    std::vector<StepRecord> history;
    TrainState final_state;
};

// I' = (I + eta_s) * eta_m per voxel, independent draws for both patches.
PatchPair inject_noise(const PatchPair& patch, const NoiseConfig& nc, Rng& rng);

class Trainer {
public:
    explicit Trainer(TrainConfig cfg);

    [[nodiscard]] const TrainConfig& config() const { return cfg_; }
    [[nodiscard]] const Backbone& backbone() const { return net_; }
    [[nodiscard]] const PatchGeometry& geometry() const { return geometry_; }

    // Supervised-only training from init_weights; deterministic in cfg.seed.
    [[nodiscard]] PretrainResult pretrain(const std::vector<AnnotatedSample>& annotated) const;

    // Fresh Mean Teacher state: student = teacher = pretrained weights.
    [[nodiscard]] TrainState initial_state(const PretrainResult& pre) const;

    [[nodiscard]] Batch assemble_batch(const std::vector<AnnotatedSample>& annotated,
                                       const std::vector<UnannotatedSample>& unannotated,
                                       TrainState& state) const;

    void refresh_pseudo_labels(std::vector<UnannotatedSample>& unannotated,
                               const ModelWeights& weights) const;

    // Gradient of L_s + beta L_c with respect to the student weights; the
    // teacher's predictions enter as constants. Noise for step S comes from
    // the "noise-student" / "noise-teacher" streams of (seed, S).
    [[nodiscard]] BatchGradient batch_gradient(const ModelWeights& student, const ModelWeights& teacher,
                                               const Batch& batch, std::int64_t step,
                                               const StepOverrides& overrides = {}) const;

    // One RMSProp update of the student; increments S. Never touches the teacher.
    StepRecord student_step(TrainState& state, const Batch& batch, const StepOverrides& overrides = {}) const;

    // theta'_t = alpha theta'_{t-1} + (1 - alpha) theta_t with alpha = alpha(S).
    void teacher_step(TrainState& state, const StepOverrides& overrides = {}) const;

    // Runs (assemble, student_step, teacher_step, monitoring) until S == until_step.
    void run(TrainState& state, const std::vector<AnnotatedSample>& annotated,
             std::vector<UnannotatedSample>& unannotated, std::int64_t until_step,
             const TrainHooks& hooks = {}) const;

    // Mean hard lesion Dice over the monitoring subset of the annotated set.
    [[nodiscard]] double training_dice(const ModelWeights& w,
                                       const std::vector<AnnotatedSample>& annotated) const;

    // pretrain -> teacher := student := pretrained -> pseudo-labels -> run.
    // In supervised-only mode the pretrained weights are returned as both models.
    [[nodiscard]] TrainResult train(const std::vector<AnnotatedSample>& annotated,
                                    std::vector<UnannotatedSample>& unannotated,
                                    const TrainHooks& hooks = {}) const;

    // Continues the Mean Teacher phase from the pretrained result (shared
    // between a baseline and a Mean Teacher run).
    [[nodiscard]] TrainResult train_from(const PretrainResult& pre,
                                         const std::vector<AnnotatedSample>& annotated,
                                         std::vector<UnannotatedSample>& unannotated,
                                         const TrainHooks& hooks = {}) const;

private:
    void rmsprop_update(TrainState& state, const Gradients& g) const;

    TrainConfig cfg_;
    Backbone net_;
    PatchGeometry geometry_;
};

// ---------------------------------------------------------------------------
// Checkpoints
//
// Binary container: "MTCK", u32 version, u64 schema id, i64 step, ramp and EMA
// schedule constants, RNG state, then student / teacher / pseudo-label-source
// weights (named float32 arrays, little endian), RMSProp accumulators
// (float64), and a trailing FNV-1a checksum over everything before it.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

// In-memory form of the same container.
std::string encode_checkpoint(const TrainState& state);
TrainState decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint");

}  // namespace mtseg
