#include "mtseg/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace mtseg {

std::string to_string(Activation a) {
    return a == Activation::relu ? "relu" : "leaky_relu";
}

Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "leaky_relu") return Activation::leaky_relu;
    throw ConfigError("unknown activation '" + s + "' (expected relu or leaky_relu)");
}

BackboneConfig BackboneConfig::full_scale() {
    BackboneConfig cfg;
    cfg.conv_filters = {30, 30, 40, 40, 40, 40, 50, 50};
    cfg.conv_kernels.assign(kConvStages, {3, 3, 3});
    cfg.fc_filters = {250, 250};
    cfg.downsample_factor = 3;
    cfg.hi_patch = {37, 37, 21};
    cfg.lo_patch = {23, 23, 18};
    return cfg;
}

namespace {

const char* kAxisNames[3] = {"x", "y", "z"};

void check_layer_lists(const BackboneConfig& cfg) {
    if (cfg.conv_filters.size() != kConvStages || cfg.conv_kernels.size() != kConvStages) {
        throw ConfigError("backbone needs exactly 8 convolutional stages per pathway (got " +
                          std::to_string(cfg.conv_filters.size()) + " filter counts, " +
                          std::to_string(cfg.conv_kernels.size()) + " kernels)");
    }
    if (cfg.fc_filters.size() != 2) {
        throw ConfigError("backbone needs exactly two 1^3 layers before the classifier");
    }
    for (int f : cfg.conv_filters) {
        if (f < 1) throw ConfigError("filter counts must be positive");
    }
    for (int f : cfg.fc_filters) {
        if (f < 1) throw ConfigError("filter counts must be positive");
    }
    for (const auto& k : cfg.conv_kernels) {
        for (int a = 0; a < 3; ++a) {
            if (k[a] < 1 || k[a] % 2 == 0) {
                throw ConfigError("kernel extents must be odd and positive");
            }
        }
    }
    if (cfg.downsample_factor < 1) throw ConfigError("downsample factor must be >= 1");
    if (cfg.num_classes < 2 || cfg.num_classes > 255) {
        throw ConfigError("number of classes must be in [2, 255]");
    }
    if (cfg.leak < 0.0 || cfg.leak >= 1.0) throw ConfigError("leak must be in [0, 1)");
}

struct LayerSpec {
    std::string name;
    int cin = 0;
    int cout = 0;
    std::array<int, 3> kernel{1, 1, 1};

    [[nodiscard]] int taps() const { return kernel[0] * kernel[1] * kernel[2]; }
};

// Parameter order: hi.conv1..8, lo.conv1..8, fc1, fc2, cls; weight then bias.
std::vector<LayerSpec> layer_specs(const BackboneConfig& cfg) {
    std::vector<LayerSpec> specs;
    for (const char* path : {"hi", "lo"}) {
        int cin = 1;
        for (int l = 0; l < kConvStages; ++l) {
            specs.push_back({std::string(path) + ".conv" + std::to_string(l + 1), cin,
                             cfg.conv_filters[l], cfg.conv_kernels[l]});
            cin = cfg.conv_filters[l];
        }
    }
    int cin = 2 * cfg.conv_filters.back();
    for (std::size_t l = 0; l < cfg.fc_filters.size(); ++l) {
        specs.push_back({"fc" + std::to_string(l + 1), cin, cfg.fc_filters[l], {1, 1, 1}});
        cin = cfg.fc_filters[l];
    }
    specs.push_back({"cls", cin, cfg.num_classes, {1, 1, 1}});
    return specs;
}

// ---------------------------------------------------------------------------
// Dense (channel, x, y, z) tensors and valid 3D convolution.
//
// Convolutions are evaluated on the input's own strides: for each tap the
// whole flattened input is swept once with a fixed offset, producing results
// at every position whose window stays inside the flat buffer. Positions that
// wrap across rows are discarded by the crop afterwards. This keeps the inner
// loop a contiguous axpy/dot at the cost of some wasted border work.
// ---------------------------------------------------------------------------

struct Tensor {
    int channels = 0;
    Shape3 shape{};
    std::vector<double> data;

    Tensor() = default;
    Tensor(int c, Shape3 s) : channels(c), shape(s), data(static_cast<std::size_t>(c) * s.volume()) {}

    double* channel(int c) { return data.data() + static_cast<std::size_t>(c) * shape.volume(); }
    [[nodiscard]] const double* channel(int c) const {
        return data.data() + static_cast<std::size_t>(c) * shape.volume();
    }
};

struct SweepLayout {
    std::size_t stride_x = 0;
    std::size_t stride_y = 0;
    std::size_t span = 0;  // number of swept positions
    Shape3 out{};
};

SweepLayout sweep_layout(const Shape3& in, const std::array<int, 3>& k) {
    SweepLayout l;
    l.stride_y = static_cast<std::size_t>(in.z);
    l.stride_x = static_cast<std::size_t>(in.y) * in.z;
    l.out = {in.x - k[0] + 1, in.y - k[1] + 1, in.z - k[2] + 1};
    const std::size_t max_offset = (k[0] - 1) * l.stride_x + (k[1] - 1) * l.stride_y + (k[2] - 1);
    l.span = in.volume() - max_offset;
    return l;
}

void conv_forward(const Tensor& in, const LayerSpec& spec, const double* weight, const double* bias,
                  Tensor& out) {
    const SweepLayout l = sweep_layout(in.shape, spec.kernel);
    out = Tensor(spec.cout, l.out);
    std::vector<double> acc(l.span);
    const int taps = spec.taps();
    for (int co = 0; co < spec.cout; ++co) {
        std::fill(acc.begin(), acc.end(), bias[co]);
        for (int ci = 0; ci < spec.cin; ++ci) {
            const double* src = in.channel(ci);
            const double* wk = weight + (static_cast<std::size_t>(co) * spec.cin + ci) * taps;
            int t = 0;
            for (int dx = 0; dx < spec.kernel[0]; ++dx) {
                for (int dy = 0; dy < spec.kernel[1]; ++dy) {
                    for (int dz = 0; dz < spec.kernel[2]; ++dz, ++t) {
                        const double wv = wk[t];
                        const double* s = src + dx * l.stride_x + dy * l.stride_y + dz;
                        double* a = acc.data();
                        for (std::size_t p = 0; p < l.span; ++p) a[p] += wv * s[p];
                    }
                }
            }
        }
        double* dst = out.channel(co);
        for (int x = 0; x < l.out.x; ++x) {
            for (int y = 0; y < l.out.y; ++y) {
                const double* row = acc.data() + x * l.stride_x + y * l.stride_y;
                std::copy(row, row + l.out.z, dst);
                dst += l.out.z;
            }
        }
    }
}

// Accumulates weight/bias gradients; writes the input gradient when `grad_in`
// is non-null (it must be zero-initialised with the input's shape).
void conv_backward(const Tensor& in, const LayerSpec& spec, const double* weight,
                   const Tensor& grad_out, double* grad_weight, double* grad_bias, Tensor* grad_in) {
    const SweepLayout l = sweep_layout(in.shape, spec.kernel);
    std::vector<double> full(l.span);
    const int taps = spec.taps();
    for (int co = 0; co < spec.cout; ++co) {
        std::fill(full.begin(), full.end(), 0.0);
        const double* g = grad_out.channel(co);
        double bias_sum = 0.0;
        for (int x = 0; x < l.out.x; ++x) {
            for (int y = 0; y < l.out.y; ++y) {
                double* row = full.data() + x * l.stride_x + y * l.stride_y;
                for (int z = 0; z < l.out.z; ++z) {
                    row[z] = *g;
                    bias_sum += *g++;
                }
            }
        }
        grad_bias[co] += bias_sum;
        for (int ci = 0; ci < spec.cin; ++ci) {
            const double* src = in.channel(ci);
            double* gsrc = grad_in ? grad_in->channel(ci) : nullptr;
            const std::size_t wbase = (static_cast<std::size_t>(co) * spec.cin + ci) * taps;
            int t = 0;
            for (int dx = 0; dx < spec.kernel[0]; ++dx) {
                for (int dy = 0; dy < spec.kernel[1]; ++dy) {
                    for (int dz = 0; dz < spec.kernel[2]; ++dz, ++t) {
                        const std::size_t off = dx * l.stride_x + dy * l.stride_y + dz;
                        const double* s = src + off;
                        const double* f = full.data();
                        double dot = 0.0;
                        for (std::size_t p = 0; p < l.span; ++p) dot += f[p] * s[p];
                        grad_weight[wbase + t] += dot;
                        if (gsrc) {
                            const double wv = weight[wbase + t];
                            double* gs = gsrc + off;
                            for (std::size_t p = 0; p < l.span; ++p) gs[p] += wv * f[p];
                        }
                    }
                }
            }
        }
    }
}

void activate(Tensor& t, double slope) {
    for (double& v : t.data) {
        if (v < 0.0) v *= slope;
    }
}

// The activation's derivative is recovered from its output: slopes are
// positive (or zero for relu) so the sign of the output matches the input.
void activate_backward(const Tensor& out, double slope, Tensor& grad) {
    for (std::size_t i = 0; i < grad.data.size(); ++i) {
        if (!(out.data[i] > 0.0)) grad.data[i] *= slope;
    }
}

Tensor to_tensor(const Grid3<float>& g) {
    Tensor t(1, g.shape());
    const auto v = g.values();
    std::copy(v.begin(), v.end(), t.data.begin());
    return t;
}

}  // namespace

// ---------------------------------------------------------------------------

GeometryReport check_geometry(const BackboneConfig& cfg) {
    check_layer_lists(cfg);
    GeometryReport r;
    std::string problems;
    auto complain = [&](const std::string& msg) {
        if (!problems.empty()) problems += "; ";
        problems += msg;
    };
    for (int a = 0; a < 3; ++a) {
        int shrink = 0;
        for (const auto& k : cfg.conv_kernels) shrink += k[a] - 1;
        const int hi = cfg.hi_patch[a];
        const int lo = cfg.lo_patch[a];
        r.margin[a] = shrink / 2;
        r.hi_out[a] = hi - shrink;
        r.lo_out[a] = lo - shrink;
        r.lo_upsampled[a] = r.lo_out[a] * cfg.downsample_factor;
        if (r.hi_out[a] < 1) {
            complain(std::string("axis ") + kAxisNames[a] + ": high-resolution patch extent " +
                     std::to_string(hi) + " cannot absorb " + std::to_string(shrink) +
                     " voxels of valid-convolution shrinkage (deficit " +
                     std::to_string(1 - r.hi_out[a]) + ")");
        }
        if (r.lo_out[a] < 1) {
            complain(std::string("axis ") + kAxisNames[a] + ": low-resolution patch extent " +
                     std::to_string(lo) + " cannot absorb " + std::to_string(shrink) +
                     " voxels of valid-convolution shrinkage (deficit " +
                     std::to_string(1 - r.lo_out[a]) + ")");
        }
        if (r.hi_out[a] >= 1 && r.lo_out[a] >= 1 && r.lo_upsampled[a] < r.hi_out[a]) {
            complain(std::string("axis ") + kAxisNames[a] + ": upsampled low-resolution output " +
                     std::to_string(r.lo_upsampled[a]) + " < high-resolution output " +
                     std::to_string(r.hi_out[a]) + " (deficit " +
                     std::to_string(r.hi_out[a] - r.lo_upsampled[a]) + ")");
        }
        r.crop_offset[a] = (r.lo_upsampled[a] - r.hi_out[a]) / 2;
    }
    if (!problems.empty()) throw GeometryError("incompatible backbone geometry: " + problems);
    r.output = r.hi_out;
    return r;
}

ModelWeights init_weights(const BackboneConfig& cfg) {
    check_layer_lists(cfg);
    ModelWeights w;
    Rng rng(cfg.init_seed);
    for (const auto& spec : layer_specs(cfg)) {
        const std::size_t fan_in = static_cast<std::size_t>(spec.cin) * spec.taps();
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        ParamTensor<float> weight{spec.name + ".weight",
                                  {spec.cout, spec.cin, spec.kernel[0], spec.kernel[1], spec.kernel[2]},
                                  std::vector<float>(static_cast<std::size_t>(spec.cout) * fan_in)};
        for (float& v : weight.values) v = static_cast<float>(normal(rng));
        w.entries.push_back(std::move(weight));
        w.entries.push_back({spec.name + ".bias", {spec.cout},
                             std::vector<float>(static_cast<std::size_t>(spec.cout), 0.0f)});
    }
    return w;
}

// ---------------------------------------------------------------------------

struct ForwardPass::Tape {
    const Backbone* net = nullptr;
    std::vector<LayerSpec> specs;
    std::vector<std::vector<double>> weights;  // per layer, double copies
    Tensor hi_in, lo_in;
    std::vector<Tensor> hi_acts, lo_acts;  // post-activation outputs of each stage
    Tensor lo_cropped;                     // upsampled + cropped lo features
    Tensor concat;
    std::vector<Tensor> fc_acts;
    ProbabilityMap probs;
};

ForwardPass::ForwardPass(std::unique_ptr<Tape> tape) : tape_(std::move(tape)) {}
ForwardPass::ForwardPass(ForwardPass&&) noexcept = default;
ForwardPass& ForwardPass::operator=(ForwardPass&&) noexcept = default;
ForwardPass::~ForwardPass() = default;

const ProbabilityMap& ForwardPass::probabilities() const { return tape_->probs; }

Backbone::Backbone(BackboneConfig cfg) : cfg_(std::move(cfg)), geometry_(check_geometry(cfg_)) {
    schema_id_ = mtseg::init_weights(cfg_).schema_id();
}

void Backbone::check_inputs(const ModelWeights& w, const PatchPair& p) const {
    if (w.schema_id() != schema_id_) {
        throw SchemaError("weights do not match the backbone configuration");
    }
    if (p.hi_res.shape() != cfg_.hi_patch || p.lo_res.shape() != cfg_.lo_patch) {
        throw GeometryError("patch shapes " + to_string(p.hi_res.shape()) + " / " +
                            to_string(p.lo_res.shape()) + " do not match configured " +
                            to_string(cfg_.hi_patch) + " / " + to_string(cfg_.lo_patch));
    }
}

ForwardPass Backbone::forward_pass(const ModelWeights& w, const PatchPair& p) const {
    check_inputs(w, p);
    auto tape = std::make_unique<ForwardPass::Tape>();
    tape->net = this;
    tape->specs = layer_specs(cfg_);
    tape->weights.reserve(w.entries.size());
    for (const auto& e : w.entries) tape->weights.emplace_back(e.values.begin(), e.values.end());

    const double slope = cfg_.activation == Activation::relu ? 0.0 : cfg_.leak;
    const auto& specs = tape->specs;
    const auto& wts = tape->weights;

    auto run_path = [&](const Tensor& input, int first_layer, std::vector<Tensor>& acts) {
        acts.resize(kConvStages);
        const Tensor* cur = &input;
        for (int l = 0; l < kConvStages; ++l) {
            const int li = first_layer + l;
            conv_forward(*cur, specs[li], wts[2 * li].data(), wts[2 * li + 1].data(), acts[l]);
            activate(acts[l], slope);
            cur = &acts[l];
        }
    };
    tape->hi_in = to_tensor(p.hi_res);
    tape->lo_in = to_tensor(p.lo_res);
    run_path(tape->hi_in, 0, tape->hi_acts);
    run_path(tape->lo_in, kConvStages, tape->lo_acts);

    const Shape3 out = geometry_.output;
    const Shape3 off = geometry_.crop_offset;
    const int d = cfg_.downsample_factor;
    const Tensor& lo = tape->lo_acts.back();
    tape->lo_cropped = Tensor(lo.channels, out);
    for (int c = 0; c < lo.channels; ++c) {
        const double* src = lo.channel(c);
        double* dst = tape->lo_cropped.channel(c);
        for (int x = 0; x < out.x; ++x) {
            const int lx = (x + off.x) / d;
            for (int y = 0; y < out.y; ++y) {
                const int ly = (y + off.y) / d;
                for (int z = 0; z < out.z; ++z) {
                    const int lz = (z + off.z) / d;
                    *dst++ = src[(static_cast<std::size_t>(lx) * lo.shape.y + ly) * lo.shape.z + lz];
                }
            }
        }
    }

    const Tensor& hi = tape->hi_acts.back();
    tape->concat = Tensor(hi.channels + lo.channels, out);
    std::copy(hi.data.begin(), hi.data.end(), tape->concat.data.begin());
    std::copy(tape->lo_cropped.data.begin(), tape->lo_cropped.data.end(),
              tape->concat.data.begin() + static_cast<std::ptrdiff_t>(hi.data.size()));

    const int first_fc = 2 * kConvStages;
    const int n_fc = static_cast<int>(cfg_.fc_filters.size());
    tape->fc_acts.resize(n_fc);
    const Tensor* cur = &tape->concat;
    for (int l = 0; l < n_fc; ++l) {
        const int li = first_fc + l;
        conv_forward(*cur, specs[li], wts[2 * li].data(), wts[2 * li + 1].data(), tape->fc_acts[l]);
        activate(tape->fc_acts[l], slope);
        cur = &tape->fc_acts[l];
    }
    const int cls = first_fc + n_fc;
    Tensor logits;
    conv_forward(*cur, specs[cls], wts[2 * cls].data(), wts[2 * cls + 1].data(), logits);

    const int k = cfg_.num_classes;
    const std::size_t nv = out.volume();
    tape->probs = ProbabilityMap(k, out);
    for (std::size_t v = 0; v < nv; ++v) {
        double mx = logits.data[v];
        for (int i = 1; i < k; ++i) mx = std::max(mx, logits.data[i * nv + v]);
        double sum = 0.0;
        for (int i = 0; i < k; ++i) {
            const double e = std::exp(logits.data[i * nv + v] - mx);
            tape->probs.at(i, v) = e;
            sum += e;
        }
        for (int i = 0; i < k; ++i) tape->probs.at(i, v) /= sum;
    }
    return ForwardPass(std::move(tape));
}

void ForwardPass::backward(const ProbabilityMap& upstream, Gradients& grads) const {
    const Tape& t = *tape_;
    const Backbone& net = *t.net;
    const BackboneConfig& cfg = net.config();
    const GeometryReport& geo = net.geometry();
    if (upstream.num_classes != t.probs.num_classes || upstream.shape != t.probs.shape) {
        throw ShapeError("upstream gradient shape does not match the network output");
    }
    if (grads.schema_id() != net.schema_id()) {
        throw SchemaError("gradient accumulator does not match the backbone configuration");
    }
    const double slope = cfg.activation == Activation::relu ? 0.0 : cfg.leak;
    const auto& specs = t.specs;
    const auto& wts = t.weights;
    auto gw = [&](int layer) { return grads.entries[2 * layer].values.data(); };
    auto gb = [&](int layer) { return grads.entries[2 * layer + 1].values.data(); };

    // Softmax Jacobian: dL/dz_i = p_i (u_i - sum_j p_j u_j).
    const int k = cfg.num_classes;
    const Shape3 out = geo.output;
    const std::size_t nv = out.volume();
    Tensor grad(k, out);
    for (std::size_t v = 0; v < nv; ++v) {
        double dot = 0.0;
        for (int i = 0; i < k; ++i) dot += t.probs.at(i, v) * upstream.at(i, v);
        for (int i = 0; i < k; ++i) {
            grad.data[i * nv + v] = t.probs.at(i, v) * (upstream.at(i, v) - dot);
        }
    }

    const int first_fc = 2 * kConvStages;
    const int n_fc = static_cast<int>(t.fc_acts.size());
    const int cls = first_fc + n_fc;
    {
        const Tensor& in = n_fc > 0 ? t.fc_acts.back() : t.concat;
        Tensor gin(in.channels, in.shape);
        conv_backward(in, specs[cls], wts[2 * cls].data(), grad, gw(cls), gb(cls), &gin);
        grad = std::move(gin);
    }
    for (int l = n_fc - 1; l >= 0; --l) {
        const int li = first_fc + l;
        activate_backward(t.fc_acts[l], slope, grad);
        const Tensor& in = l > 0 ? t.fc_acts[l - 1] : t.concat;
        Tensor gin(in.channels, in.shape);
        conv_backward(in, specs[li], wts[2 * li].data(), grad, gw(li), gb(li), &gin);
        grad = std::move(gin);
    }

    // Split the concatenated gradient back into the two pathways.
    const Tensor& hi_last = t.hi_acts.back();
    const Tensor& lo_last = t.lo_acts.back();
    Tensor g_hi(hi_last.channels, out);
    std::copy(grad.data.begin(), grad.data.begin() + static_cast<std::ptrdiff_t>(g_hi.data.size()),
              g_hi.data.begin());
    Tensor g_lo(lo_last.channels, lo_last.shape);
    const Shape3 off = geo.crop_offset;
    const int d = cfg.downsample_factor;
    for (int c = 0; c < lo_last.channels; ++c) {
        const double* src = grad.channel(hi_last.channels + c);
        double* dst = g_lo.channel(c);
        for (int x = 0; x < out.x; ++x) {
            const int lx = (x + off.x) / d;
            for (int y = 0; y < out.y; ++y) {
                const int ly = (y + off.y) / d;
                for (int z = 0; z < out.z; ++z) {
                    const int lz = (z + off.z) / d;
                    dst[(static_cast<std::size_t>(lx) * lo_last.shape.y + ly) * lo_last.shape.z + lz] +=
                        *src++;
                }
            }
        }
    }

    auto back_path = [&](Tensor g, const Tensor& input, const std::vector<Tensor>& acts, int first) {
        for (int l = kConvStages - 1; l >= 0; --l) {
            const int li = first + l;
            activate_backward(acts[l], slope, g);
            const Tensor& in = l > 0 ? acts[l - 1] : input;
            if (l > 0) {
                Tensor gin(in.channels, in.shape);
                conv_backward(in, specs[li], wts[2 * li].data(), g, gw(li), gb(li), &gin);
                g = std::move(gin);
            } else {
                conv_backward(in, specs[li], wts[2 * li].data(), g, gw(li), gb(li), nullptr);
            }
        }
    };
    back_path(std::move(g_hi), t.hi_in, t.hi_acts, 0);
    back_path(std::move(g_lo), t.lo_in, t.lo_acts, kConvStages);
}

ProbabilityMap Backbone::forward(const ModelWeights& w, const PatchPair& p) const {
    return forward_pass(w, p).probabilities();
}

Gradients Backbone::forward_with_gradients(const ModelWeights& w, const PatchPair& p,
                                           const ProbabilityMap& upstream) const {
    Gradients g = w.zeros_like<double>();
    forward_pass(w, p).backward(upstream, g);
    return g;
}

}  // namespace mtseg
