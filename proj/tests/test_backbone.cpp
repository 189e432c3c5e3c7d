#include <doctest.h>

#include <cmath>

#include "mtseg/backbone.hpp"
#include "mtseg/losses.hpp"
#include "test_support.hpp"

using namespace mtseg;

namespace {

// Direct-loop re-implementation of the network used as an oracle.
struct RefTensor {
    int c = 0;
    Shape3 s;
    std::vector<double> v;
    double& at(int ch, int x, int y, int z) { return v[((static_cast<std::size_t>(ch) * s.x + x) * s.y + y) * s.z + z]; }
    double at(int ch, int x, int y, int z) const {
        return v[((static_cast<std::size_t>(ch) * s.x + x) * s.y + y) * s.z + z];
    }
};

RefTensor ref_conv(const RefTensor& in, const ParamTensor<float>& w, const ParamTensor<float>& b, double slope,
                   bool activate) {
    const int cout = w.dims[0], kx = w.dims[2], ky = w.dims[3], kz = w.dims[4];
    RefTensor out{cout, {in.s.x - kx + 1, in.s.y - ky + 1, in.s.z - kz + 1}, {}};
    out.v.assign(static_cast<std::size_t>(cout) * out.s.volume(), 0.0);
    for (int o = 0; o < cout; ++o)
        for (int x = 0; x < out.s.x; ++x)
            for (int y = 0; y < out.s.y; ++y)
                for (int z = 0; z < out.s.z; ++z) {
                    double acc = b.values[o];
                    for (int i = 0; i < in.c; ++i)
                        for (int a = 0; a < kx; ++a)
                            for (int bb = 0; bb < ky; ++bb)
                                for (int cc = 0; cc < kz; ++cc) {
                                    const std::size_t wi = (((static_cast<std::size_t>(o) * in.c + i) * kx + a) * ky + bb) * kz + cc;
                                    acc += w.values[wi] * in.at(i, x + a, y + bb, z + cc);
                                }
                    if (activate && acc < 0) acc *= slope;
                    out.at(o, x, y, z) = acc;
                }
    return out;
}

RefTensor from_grid(const Grid3<float>& g) {
    RefTensor t{1, g.shape(), {}};
    for (float f : g.values()) t.v.push_back(f);
    return t;
}

ProbabilityMap ref_forward(const BackboneConfig& cfg, const ModelWeights& w, const PatchPair& p) {
    const double slope = cfg.activation == Activation::relu ? 0.0 : cfg.leak;
    auto layer = [&](const RefTensor& in, const std::string& name, bool act) {
        return ref_conv(in, w.find(name + ".weight"), w.find(name + ".bias"), slope, act);
    };
    RefTensor hi = from_grid(p.hi_res), lo = from_grid(p.lo_res);
    for (int l = 1; l <= kConvStages; ++l) {
        hi = layer(hi, "hi.conv" + std::to_string(l), true);
        lo = layer(lo, "lo.conv" + std::to_string(l), true);
    }
    const int d = cfg.downsample_factor;
    const Shape3 off{(lo.s.x * d - hi.s.x) / 2, (lo.s.y * d - hi.s.y) / 2, (lo.s.z * d - hi.s.z) / 2};
    RefTensor cat{hi.c + lo.c, hi.s, {}};
    cat.v = hi.v;
    cat.v.resize(static_cast<std::size_t>(cat.c) * hi.s.volume());
    for (int c = 0; c < lo.c; ++c)
        for (int x = 0; x < hi.s.x; ++x)
            for (int y = 0; y < hi.s.y; ++y)
                for (int z = 0; z < hi.s.z; ++z)
                    cat.at(hi.c + c, x, y, z) = lo.at(c, (x + off.x) / d, (y + off.y) / d, (z + off.z) / d);
    RefTensor f = layer(cat, "fc1", true);
    f = layer(f, "fc2", true);
    f = layer(f, "cls", false);
    ProbabilityMap out(f.c, f.s);
    for (std::size_t v = 0; v < f.s.volume(); ++v) {
        double sum = 0.0;
        for (int c = 0; c < f.c; ++c) sum += std::exp(f.v[c * f.s.volume() + v]);
        for (int c = 0; c < f.c; ++c) out.at(c, v) = std::exp(f.v[c * f.s.volume() + v]) / sum;
    }
    return out;
}

}  // namespace

TEST_CASE("default desk geometry") {
    const GeometryReport g = check_geometry(BackboneConfig{});
    CHECK(g.hi_out == Shape3{15, 15, 7});
    CHECK(g.lo_out == Shape3{5, 5, 3});
    CHECK(g.lo_upsampled == Shape3{15, 15, 9});
    CHECK(g.crop_offset == Shape3{0, 0, 1});
    CHECK(g.margin == Shape3{5, 5, 3});
    CHECK(g.output == Shape3{15, 15, 7});
}

TEST_CASE("full-size geometry yields 21x21x5") {
    const GeometryReport g = check_geometry(BackboneConfig::full_scale());
    CHECK(g.output == Shape3{21, 21, 5});
}

TEST_CASE("geometry rejects malformed configurations") {
    BackboneConfig c;
    c.lo_patch = {11, 15, 9};
    try {
        check_geometry(c);
        FAIL("expected GeometryError");
    } catch (const GeometryError& e) {
        CHECK(std::string(e.what()).find("x") != std::string::npos);
    }

    c = BackboneConfig{};
    c.conv_filters.pop_back();
    CHECK_THROWS_AS(check_geometry(c), ConfigError);
    c = BackboneConfig{};
    c.conv_kernels[0] = {2, 3, 3};
    CHECK_THROWS_AS(check_geometry(c), ConfigError);
    c = BackboneConfig{};
    c.fc_filters = {16};
    CHECK_THROWS_AS(check_geometry(c), ConfigError);
    c = BackboneConfig{};
    c.num_classes = 1;
    CHECK_THROWS_AS(check_geometry(c), ConfigError);
    c = BackboneConfig{};
    c.hi_patch = {9, 9, 5};
    CHECK_THROWS(check_geometry(c));
}

TEST_CASE("init_weights: naming, shapes, determinism and scale") {
    const BackboneConfig cfg;
    const ModelWeights a = init_weights(cfg);
    const ModelWeights b = init_weights(cfg);
    CHECK(a == b);
    CHECK(a.entries.size() == 2 * (2 * kConvStages + 3));
    CHECK(a.entries.front().name == "hi.conv1.weight");
    CHECK(a.entries.back().name == "cls.bias");
    CHECK(a.find("hi.conv1.weight").dims == std::vector<int>{4, 1, 3, 3, 3});
    CHECK(a.find("fc1.weight").dims == std::vector<int>{16, 16, 1, 1, 1});
    for (float v : a.find("lo.conv5.bias").values) CHECK(v == 0.0f);

    const auto& w = a.find("hi.conv3.weight").values;
    double ss = 0.0;
    for (float v : w) ss += static_cast<double>(v) * v;
    CHECK(std::sqrt(ss / w.size()) == doctest::Approx(std::sqrt(2.0 / (4 * 27))).epsilon(0.15));

    BackboneConfig other = cfg;
    other.init_seed = 2;
    CHECK_FALSE(init_weights(other) == a);
}

TEST_CASE("forward matches a direct-loop reference") {
    std::mt19937_64 rng(17);
    for (BackboneConfig cfg : {testing::tiny_backbone(), BackboneConfig{}}) {
        cfg.init_seed = 9;
        const Backbone net(cfg);
        const ModelWeights w = net.init_weights();
        const PatchPair p = testing::random_patch(cfg, rng);
        const ProbabilityMap got = net.forward(w, p);
        const ProbabilityMap want = ref_forward(cfg, w, p);
        REQUIRE(got.shape == want.shape);
        CHECK(validate_probability_map(got));
        double worst = 0.0;
        for (std::size_t i = 0; i < got.probs.size(); ++i) worst = std::max(worst, std::abs(got.probs[i] - want.probs[i]));
        CHECK(worst < 1e-12);
    }
}

TEST_CASE("relu activation variant matches the reference") {
    std::mt19937_64 rng(4);
    BackboneConfig cfg = testing::tiny_backbone();
    cfg.activation = Activation::relu;
    const Backbone net(cfg);
    const ModelWeights w = net.init_weights();
    const PatchPair p = testing::random_patch(cfg, rng);
    const ProbabilityMap got = net.forward(w, p);
    const ProbabilityMap want = ref_forward(cfg, w, p);
    for (std::size_t i = 0; i < got.probs.size(); ++i) CHECK(got.probs[i] == doctest::Approx(want.probs[i]).epsilon(1e-12));
}

TEST_CASE("backward matches central differences on the tiny network") {
    std::mt19937_64 rng(23);
    const BackboneConfig cfg = testing::tiny_backbone();
    const Backbone net(cfg);
    ModelWeights w = net.init_weights();
    REQUIRE(w.parameter_count() <= 500);
    // Nonzero biases keep pre-activations away from the activation kink.
    std::normal_distribution<double> jitter(0.0, 0.3);
    for (auto& e : w.entries)
        if (e.name.ends_with(".bias"))
            for (float& b : e.values) b = static_cast<float>(jitter(rng));
    const PatchPair p = testing::random_patch(cfg, rng);
    const LabelMap y = testing::random_labels(cfg.num_classes, net.geometry().output, rng);

    auto loss = [&](const ModelWeights& ww) { return segmentation_loss(net.forward(ww, p), y); };
    const ForwardPass fp = net.forward_pass(w, p);
    Gradients g = w.zeros_like<double>();
    fp.backward(segmentation_loss_gradient(fp.probabilities(), y), g);

    int bad = 0;
    for (std::size_t e = 0; e < w.entries.size(); ++e) {
        for (std::size_t i = 0; i < w.entries[e].values.size(); ++i) {
            const float orig = w.entries[e].values[i];
            const float h = 1e-4f;
            w.entries[e].values[i] = orig + h;
            const double up = loss(w);
            w.entries[e].values[i] = orig - h;
            const double down = loss(w);
            w.entries[e].values[i] = orig;
            const double fd = (up - down) / (static_cast<double>(orig + h) - static_cast<double>(orig - h));
            const double an = g.entries[e].values[i];
            if (std::abs(fd - an) / std::max({1e-6, std::abs(fd), std::abs(an)}) > 1e-2) { ++bad; MESSAGE(w.entries[e].name << " " << i << " fd=" << fd << " an=" << an); }
        }
    }
    CHECK(bad == 0);
}

TEST_CASE("forward_with_gradients accumulates the same gradient as forward_pass") {
    std::mt19937_64 rng(31);
    const Backbone net(testing::tiny_backbone());
    const ModelWeights w = net.init_weights();
    const PatchPair p = testing::random_patch(net.config(), rng);
    const ProbabilityMap up = testing::random_probabilities(2, net.geometry().output, rng);
    const Gradients a = net.forward_with_gradients(w, p, up);
    Gradients b = w.zeros_like<double>();
    net.forward_pass(w, p).backward(up, b);
    CHECK(a == b);
}

TEST_CASE("shape and schema mismatches are rejected") {
    std::mt19937_64 rng(1);
    const Backbone net(testing::tiny_backbone());
    const ModelWeights w = net.init_weights();
    PatchPair p = testing::random_patch(net.config(), rng);
    p.hi_res = Grid3<float>(Shape3{7, 7, 7});
    CHECK_THROWS_AS((void)net.forward(w, p), GeometryError);

    const PatchPair ok = testing::random_patch(net.config(), rng);
    const ModelWeights other = init_weights(BackboneConfig{});
    CHECK_THROWS_AS((void)net.forward(other, ok), SchemaError);

    const ForwardPass fp = net.forward_pass(w, ok);
    Gradients wrong = other.zeros_like<double>();
    CHECK_THROWS_AS(fp.backward(fp.probabilities(), wrong), SchemaError);
    Gradients g = w.zeros_like<double>();
    CHECK_THROWS_AS(fp.backward(ProbabilityMap(2, Shape3{1, 1, 1}), g), ShapeError);
}
