#include "mtseg/trainer.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "bytes.hpp"

namespace mtseg {

namespace {

constexpr double kMaxWeightMagnitude = 1e6;

}  // namespace

std::string to_string(TrainMode m) {
    return m == TrainMode::supervised_only ? "supervised-only" : "mean-teacher";
}

TrainMode train_mode_from_string(const std::string& s) {
    if (s == "supervised-only") return TrainMode::supervised_only;
    if (s == "mean-teacher") return TrainMode::mean_teacher;
    throw ConfigError("unknown mode '" + s + "' (expected supervised-only or mean-teacher)");
}

void TrainConfig::validate() const {
    check_geometry(backbone);
    if (noise.additive_std < 0.0 || noise.multiplicative_std < 0.0) {
        throw ConfigError("noise standard deviations must be >= 0");
    }
    if (!(optimizer.learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
    if (!(optimizer.decay_rate > 0.0 && optimizer.decay_rate < 1.0)) {
        throw ConfigError("decay rate must be in (0, 1)");
    }
    if (!(optimizer.epsilon > 0.0)) throw ConfigError("optimizer epsilon must be > 0");
    if (ramp.ramp_length < 0 || ema.ramp_length < 0) throw ConfigError("ramp length must be >= 0");
    for (double a : {ema.alpha_rampup, ema.alpha_after}) {
        if (!(a >= 0.0 && a < 1.0)) throw ConfigError("EMA decay must be in [0, 1)");
    }
    if (batch_annotated < 1) throw ConfigError("batch needs at least one annotated patch");
    if (batch_unannotated < 0) throw ConfigError("unannotated batch size must be >= 0");
    if (pretrain_steps < 0 || total_steps < 0) throw ConfigError("step counts must be >= 0");
    if (monitor_every < 1) throw ConfigError("monitor_every must be >= 1");
    if (monitor_volumes < 1) throw ConfigError("monitor_volumes must be >= 1");
    if (pseudo_label_refresh_every < 0) throw ConfigError("pseudo_label_refresh_every must be >= 0");
    if (inference_threads < 1) throw ConfigError("inference_threads must be >= 1");
}

PatchPair inject_noise(const PatchPair& patch, const NoiseConfig& nc, Rng& rng) {
    PatchPair out = patch;
    std::normal_distribution<double> additive(0.0, nc.additive_std > 0.0 ? nc.additive_std : 1.0);
    std::normal_distribution<double> multiplicative(1.0, nc.multiplicative_std > 0.0 ? nc.multiplicative_std
                                                                                     : 1.0);
    auto apply = [&](Grid3<float>& g) {
        for (float& v : g.values()) {
            const double es = nc.additive_std > 0.0 ? additive(rng) : 0.0;
            const double em = nc.multiplicative_std > 0.0 ? multiplicative(rng) : 1.0;
            v = static_cast<float>((static_cast<double>(v) + es) * em);
        }
    };
    apply(out.hi_res);
    apply(out.lo_res);
    return out;
}

Trainer::Trainer(TrainConfig cfg)
    : cfg_(std::move(cfg)), net_(cfg_.backbone), geometry_(patch_geometry(cfg_.backbone, cfg_.lo_res_mode)) {
    cfg_.validate();
}

PretrainResult Trainer::pretrain(const std::vector<AnnotatedSample>& annotated) const {
    if (annotated.empty()) throw ConfigError("pretraining needs at least one annotated sample");
    TrainState state;
    state.student = net_.init_weights();
    state.teacher = state.student;
    state.optimizer_mean_square = state.student.zeros_like<double>();
    state.rng = derive_stream(cfg_.seed, "pretrain-batches");
    state.ramp = cfg_.ramp;
    state.ema = cfg_.ema;
    const std::vector<UnannotatedSample> none;
    PretrainResult out;
    for (std::int64_t s = 0; s < cfg_.pretrain_steps; ++s) {
        Batch batch = assemble_batch(annotated, none, state);
        out.history.push_back(student_step(state, batch));
    }
    out.weights = std::move(state.student);
    out.optimizer_mean_square = std::move(state.optimizer_mean_square);
    return out;
}

TrainState Trainer::initial_state(const PretrainResult& pre) const {
    require_same_schema(pre.weights, pre.optimizer_mean_square);
    TrainState state;
    state.step = 0;
    state.student = pre.weights;
    state.teacher = pre.weights;
    state.optimizer_mean_square = pre.optimizer_mean_square;
    state.rng = derive_stream(cfg_.seed, "mean-teacher-batches");
    state.ramp = cfg_.ramp;
    state.ema = cfg_.ema;
    state.pseudo_label_source = pre.weights;
    return state;
}

Batch Trainer::assemble_batch(const std::vector<AnnotatedSample>& annotated,
                              const std::vector<UnannotatedSample>& unannotated, TrainState& state) const {
    if (annotated.empty()) throw PreconditionError("annotated pool is empty");
    const int n_unannotated = unannotated.empty() ? 0 : cfg_.batch_unannotated;
    for (const auto& u : unannotated) {
        if (!u.pseudo_lesion) {
            throw PreconditionError("unannotated sample '" + u.id +
                                    "' has no pseudo-lesion map; call refresh_pseudo_labels first");
        }
    }
    Batch batch;
    std::uniform_int_distribution<std::size_t> pick_a(0, annotated.size() - 1);
    for (int i = 0; i < cfg_.batch_annotated; ++i) {
        const AnnotatedSample& s = annotated[pick_a(state.rng)];
        const Index3 c = sample_training_centers(s.volume, s.annotation, 1, state.rng).front();
        batch.annotated.push_back(extract_patch_pair(s.volume, &s.annotation, c, geometry_));
    }
    if (n_unannotated > 0) {
        std::uniform_int_distribution<std::size_t> pick_u(0, unannotated.size() - 1);
        for (int i = 0; i < n_unannotated; ++i) {
            const UnannotatedSample& s = unannotated[pick_u(state.rng)];
            const Index3 c = sample_training_centers(s.volume, *s.pseudo_lesion, 1, state.rng).front();
            batch.unannotated.push_back(extract_patch_pair(s.volume, nullptr, c, geometry_));
        }
    }
    return batch;
}

void Trainer::refresh_pseudo_labels(std::vector<UnannotatedSample>& unannotated,
                                    const ModelWeights& weights) const {
    for (auto& s : unannotated) {
        s.pseudo_lesion = segment_volume(net_, weights, s.volume, cfg_.lo_res_mode, cfg_.inference_threads);
    }
}

BatchGradient Trainer::batch_gradient(const ModelWeights& student, const ModelWeights& teacher,
                                      const Batch& batch, std::int64_t step,
                                      const StepOverrides& overrides) const {
    BatchGradient out;
    out.student = student.zeros_like<double>();
    out.beta = overrides.beta ? *overrides.beta : beta(step, cfg_.ramp);

    const double inv_a = 1.0 / static_cast<double>(batch.annotated.size());
    for (const auto& item : batch.annotated) {
        if (!item.target_window) throw PreconditionError("annotated patch lacks a target window");
        ForwardPass fp = net_.forward_pass(student, item);
        out.ls += segmentation_loss(fp.probabilities(), *item.target_window) * inv_a;
        ProbabilityMap up = segmentation_loss_gradient(fp.probabilities(), *item.target_window);
        for (double& v : up.probs) v *= inv_a;
        fp.backward(up, out.student);
    }

    if (!batch.unannotated.empty()) {
        Rng student_noise = derive_stream(cfg_.seed, "noise-student", static_cast<std::uint64_t>(step));
        Rng teacher_noise = derive_stream(cfg_.seed, "noise-teacher", static_cast<std::uint64_t>(step));
        const double inv_u = 1.0 / static_cast<double>(batch.unannotated.size());
        for (const auto& item : batch.unannotated) {
            const PatchPair xs = inject_noise(item, cfg_.noise, student_noise);
            const PatchPair xt = inject_noise(item, cfg_.noise, teacher_noise);
            const ProbabilityMap target = net_.forward(teacher, xt);
            ForwardPass fp = net_.forward_pass(student, xs);
            out.lc += consistency_loss(fp.probabilities(), target, cfg_.consistency) * inv_u;
            ProbabilityMap up = consistency_loss_gradient(fp.probabilities(), target, cfg_.consistency);
            const double scale = out.beta * inv_u;
            for (double& v : up.probs) v *= scale;
            fp.backward(up, out.student);
        }
    }
    return out;
}

void Trainer::rmsprop_update(TrainState& state, const Gradients& g) const {
    const double rho = cfg_.optimizer.decay_rate;
    const double lr = cfg_.optimizer.learning_rate;
    const double eps = cfg_.optimizer.epsilon;
    for (std::size_t e = 0; e < state.student.entries.size(); ++e) {
        auto& w = state.student.entries[e].values;
        auto& ms = state.optimizer_mean_square.entries[e].values;
        const auto& ge = g.entries[e].values;
        for (std::size_t i = 0; i < w.size(); ++i) {
            ms[i] = rho * ms[i] + (1.0 - rho) * ge[i] * ge[i];
            const double updated = static_cast<double>(w[i]) - lr * ge[i] / (std::sqrt(ms[i]) + eps);
            if (!std::isfinite(updated) || std::abs(updated) > kMaxWeightMagnitude) {
                throw DivergenceError("student weight '" + state.student.entries[e].name +
                                      "' diverged at step " + std::to_string(state.step));
            }
            w[i] = static_cast<float>(updated);
        }
    }
}

StepRecord Trainer::student_step(TrainState& state, const Batch& batch, const StepOverrides& overrides) const {
    require_same_schema(state.student, state.teacher);
    BatchGradient g = batch_gradient(state.student, state.teacher, batch, state.step, overrides);
    const double total = g.ls + g.beta * g.lc;
    if (!std::isfinite(total)) {
        throw DivergenceError("non-finite loss at step " + std::to_string(state.step) +
                              " (L_s = " + std::to_string(g.ls) + ", L_c = " + std::to_string(g.lc) + ")");
    }
    rmsprop_update(state, g.student);
    ++state.step;
    StepRecord r;
    r.step = state.step;
    r.ls = g.ls;
    r.lc = g.lc;
    r.beta = g.beta;
    return r;
}

void Trainer::teacher_step(TrainState& state, const StepOverrides& overrides) const {
    require_same_schema(state.student, state.teacher);
    const double a = overrides.alpha ? *overrides.alpha : alpha(state.step, state.ema);
    for (std::size_t e = 0; e < state.teacher.entries.size(); ++e) {
        auto& t = state.teacher.entries[e].values;
        const auto& s = state.student.entries[e].values;
        for (std::size_t i = 0; i < t.size(); ++i) {
            t[i] = static_cast<float>(a * static_cast<double>(t[i]) + (1.0 - a) * static_cast<double>(s[i]));
        }
    }
}

double Trainer::training_dice(const ModelWeights& w, const std::vector<AnnotatedSample>& annotated) const {
    const std::size_t n = std::min<std::size_t>(annotated.size(), static_cast<std::size_t>(cfg_.monitor_volumes));
    if (n == 0) return 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const LabelMap pred = segment_volume(net_, w, annotated[i].volume, cfg_.lo_res_mode, cfg_.inference_threads);
        sum += dice_coefficient(pred, annotated[i].annotation, 1);
    }
    return sum / static_cast<double>(n);
}

void Trainer::run(TrainState& state, const std::vector<AnnotatedSample>& annotated,
                  std::vector<UnannotatedSample>& unannotated, std::int64_t until_step,
                  const TrainHooks& hooks) const {
    while (state.step < until_step) {
        const std::int64_t every = cfg_.pseudo_label_refresh_every;
        if (every > 0 && state.step > 0 && state.step % every == 0 &&
            !(state.pseudo_label_source == state.teacher)) {
            refresh_pseudo_labels(unannotated, state.teacher);
            state.pseudo_label_source = state.teacher;
        }
        const Batch batch = assemble_batch(annotated, unannotated, state);
        StepRecord r = student_step(state, batch);
        teacher_step(state);
        r.alpha = alpha(state.step, state.ema);
        if (state.step % cfg_.monitor_every == 0 || state.step == until_step) {
            r.student_train_dice = training_dice(state.student, annotated);
            r.teacher_train_dice = training_dice(state.teacher, annotated);
        }
        state.history.push_back(r);
        if (hooks.on_step) hooks.on_step(state, r);
    }
}

TrainResult Trainer::train_from(const PretrainResult& pre, const std::vector<AnnotatedSample>& annotated,
                                std::vector<UnannotatedSample>& unannotated, const TrainHooks& hooks) const {
    TrainResult result;
    result.pretrained = pre.weights;
    TrainState state = initial_state(pre);
    if (cfg_.mode == TrainMode::mean_teacher && cfg_.total_steps > 0) {
        if (cfg_.batch_unannotated > 0 && unannotated.empty()) {
            throw ConfigError("Mean Teacher training needs unannotated samples (or batch_unannotated = 0)");
        }
        refresh_pseudo_labels(unannotated, pre.weights);
        run(state, annotated, unannotated, cfg_.total_steps, hooks);
    }
    result.teacher = state.teacher;
    result.student = state.student;
    result.history = state.history;
    result.final_state = std::move(state);
    return result;
}

TrainResult Trainer::train(const std::vector<AnnotatedSample>& annotated,
                           std::vector<UnannotatedSample>& unannotated, const TrainHooks& hooks) const {
    return train_from(pretrain(annotated), annotated, unannotated, hooks);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

using CkReader = bytes::Reader<CheckpointError>;

void put_weights(bytes::Writer& w, const ModelWeights& m) {
    w.u32(static_cast<std::uint32_t>(m.entries.size()));
    for (const auto& e : m.entries) {
        w.str(e.name);
        w.u32(static_cast<std::uint32_t>(e.dims.size()));
        for (int d : e.dims) w.u32(static_cast<std::uint32_t>(d));
        w.u64(e.values.size());
        for (float v : e.values) w.f32(v);
    }
}

void put_gradients(bytes::Writer& w, const Gradients& g) {
    w.u32(static_cast<std::uint32_t>(g.entries.size()));
    for (const auto& e : g.entries) {
        w.u64(e.values.size());
        for (double v : e.values) w.f64(v);
    }
}

template <typename T>
std::vector<T> read_values(CkReader& r, std::uint64_t n) {
    if (n > r.remaining() / sizeof(T)) throw CheckpointError(r.what() + ": array length exceeds payload");
    std::vector<T> values(static_cast<std::size_t>(n));
    for (auto& v : values) {
        if constexpr (sizeof(T) == 4) {
            v = r.f32();
        } else {
            v = r.f64();
        }
    }
    return values;
}

ModelWeights get_weights(CkReader& r) {
    ModelWeights m;
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        ParamTensor<float> e;
        e.name = r.str();
        const std::uint32_t nd = r.u32();
        if (nd > 8) throw CheckpointError(r.what() + ": implausible tensor rank");
        std::size_t count = 1;
        for (std::uint32_t d = 0; d < nd; ++d) {
            e.dims.push_back(static_cast<int>(r.u32()));
            count *= static_cast<std::size_t>(e.dims.back());
        }
        const std::uint64_t len = r.u64();
        if (len != count) throw CheckpointError(r.what() + ": tensor '" + e.name + "' size mismatch");
        e.values = read_values<float>(r, len);
        m.entries.push_back(std::move(e));
    }
    return m;
}

Gradients get_gradients(CkReader& r, const ModelWeights& like) {
    Gradients g = like.zeros_like<double>();
    const std::uint32_t n = r.u32();
    if (n != g.entries.size()) throw CheckpointError(r.what() + ": optimizer state schema mismatch");
    for (auto& e : g.entries) {
        const std::uint64_t len = r.u64();
        if (len != e.values.size()) throw CheckpointError(r.what() + ": optimizer state schema mismatch");
        e.values = read_values<double>(r, len);
    }
    return g;
}

}  // namespace

std::string encode_checkpoint(const TrainState& state) {
    require_same_schema(state.student, state.teacher);
    require_same_schema(state.student, state.optimizer_mean_square);
    bytes::Writer w;
    w.raw("MTCK");
    w.u32(kCheckpointVersion);
    w.u64(state.student.schema_id());
    w.i64(state.step);
    w.i64(state.ramp.ramp_length);
    w.i64(state.ema.ramp_length);
    w.f64(state.ema.alpha_rampup);
    w.f64(state.ema.alpha_after);
    std::ostringstream rng;
    rng << state.rng;
    w.str(rng.str());
    put_weights(w, state.student);
    put_weights(w, state.teacher);
    put_weights(w, state.pseudo_label_source);
    put_gradients(w, state.optimizer_mean_square);
    const std::uint64_t checksum = fnv1a(w.data());
    w.u64(checksum);
    return w.take();
}

TrainState decode_checkpoint(const std::string& bytes, const std::string& what) {
    if (bytes.size() < 16 || bytes.compare(0, 4, "MTCK") != 0) {
        throw CheckpointError(what + ": not a checkpoint (bad magic bytes)");
    }
    const std::size_t body = bytes.size() - 8;
    {
        CkReader tail(bytes, what);
        tail.raw(body);
        if (tail.u64() != fnv1a(std::string_view(bytes).substr(0, body))) {
            throw CheckpointError(what + ": checksum mismatch (corrupted payload)");
        }
    }
    CkReader r(bytes, what, body);
    r.raw(4);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw CheckpointError(what + ": unsupported checkpoint version " + std::to_string(version));
    }
    TrainState s;
    const std::uint64_t schema = r.u64();
    s.step = r.i64();
    s.ramp.ramp_length = r.i64();
    s.ema.ramp_length = r.i64();
    s.ema.alpha_rampup = r.f64();
    s.ema.alpha_after = r.f64();
    std::istringstream rng(r.str());
    rng >> s.rng;
    if (!rng) throw CheckpointError(what + ": unreadable RNG state");
    s.student = get_weights(r);
    s.teacher = get_weights(r);
    s.pseudo_label_source = get_weights(r);
    s.optimizer_mean_square = get_gradients(r, s.student);
    if (r.remaining() != 0) throw CheckpointError(what + ": trailing bytes");
    for (const ModelWeights* m : {&s.student, &s.teacher, &s.pseudo_label_source}) {
        if (m->schema_id() != schema) throw CheckpointError(what + ": weight schema mismatch");
    }
    if (s.step < 0) throw CheckpointError(what + ": negative step counter");
    return s;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
    write_file_atomic(path, encode_checkpoint(state));
}

TrainState load_checkpoint(const std::filesystem::path& path) {
    std::string bytes;
    try {
        bytes = read_file(path);
    } catch (const FormatError& e) {
        throw CheckpointError(e.what());
    }
    return decode_checkpoint(bytes, "checkpoint " + path.string());
}

}  // namespace mtseg
