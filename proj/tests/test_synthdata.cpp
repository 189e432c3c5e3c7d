#include <doctest.h>

#include <cmath>
#include <fstream>

#include "mtseg/synthdata.hpp"
#include "test_support.hpp"

using namespace mtseg;
namespace fs = std::filesystem;

TEST_CASE("generator is deterministic in (seed, index)") {
    const SynthConfig c = testing::small_synth();
    const auto a = generate_volume(c, 4);
    const auto b = generate_volume(c, 4);
    CHECK(a.first == b.first);
    CHECK(a.second == b.second);
    CHECK_FALSE(generate_volume(c, 5).first == a.first);
    SynthConfig other = c;
    other.seed = c.seed + 1;
    CHECK_FALSE(generate_volume(other, 4).first == a.first);
}

TEST_CASE("generated lesions lie inside the brain mask and are brighter") {
    SynthConfig c = testing::small_synth();
    c.volume_shape = {32, 32, 16};
    for (std::uint64_t i = 0; i < 5; ++i) {
        const auto [v, y] = generate_volume(c, i);
        CHECK_NOTHROW(y.validate());
        double lesion = 0, healthy = 0;
        std::size_t nl = 0, nh = 0;
        for (std::size_t k = 0; k < y.labels.size(); ++k) {
            if (y.labels[k]) {
                REQUIRE((*v.mask)[k] == 1);
                lesion += v.voxels[k];
                ++nl;
            } else if ((*v.mask)[k]) {
                healthy += v.voxels[k];
                ++nh;
            }
        }
        REQUIRE(nl > 0);
        CHECK(lesion / nl - healthy / nh > 1.0);
    }
}

TEST_CASE("generator configuration is validated") {
    SynthConfig c;
    c.lesion_count_range = {3, 1};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SynthConfig{};
    c.lesion_radius_range[0] = {2, 40};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SynthConfig{};
    c.volume_shape = {4, 4, 4};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SynthConfig{};
    c.lesion_intensity_spread = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("normalisation: zero mean, unit std inside the mask, zero outside") {
    const auto [raw, y] = generate_volume(testing::small_synth(), 0);
    const Volume v = normalize_intensity(raw);
    double sum = 0, ss = 0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < v.voxels.size(); ++k) {
        if ((*v.mask)[k]) {
            sum += v.voxels[k];
            ss += static_cast<double>(v.voxels[k]) * v.voxels[k];
            ++n;
        } else {
            CHECK(v.voxels[k] == 0.0f);
        }
    }
    CHECK(sum / n == doctest::Approx(0.0).epsilon(1e-5));
    CHECK(std::sqrt(ss / n) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("normalisation degenerate cases") {
    Volume v{Grid3<float>(Shape3{2, 2, 2}, 1.0f), Mask(Shape3{2, 2, 2}, 0)};
    CHECK_THROWS_AS(normalize_intensity(v), DegenerateMaskError);
    v.mask = Mask(Shape3{2, 2, 2}, 1);
    CHECK_THROWS_AS(normalize_intensity(v), DegenerateIntensityError);
    v.mask.reset();
    CHECK_THROWS_AS(normalize_intensity(v), DegenerateMaskError);
}

TEST_CASE("volume and label files round-trip bit-exactly") {
    testing::TempDir dir("io");
    const auto [raw, y] = generate_volume(testing::small_synth(), 1);
    const Volume v = normalize_intensity(raw);
    write_volume(dir / "v.mtsv", v);
    write_label_map(dir / "y.mtsl", y);
    CHECK(read_volume(dir / "v.mtsv") == v);
    CHECK(read_label_map(dir / "y.mtsl") == y);

    Volume unmasked{v.voxels, std::nullopt};
    write_volume(dir / "u.mtsv", unmasked);
    CHECK(read_volume(dir / "u.mtsv") == unmasked);
}

TEST_CASE("corrupted volume files are rejected") {
    testing::TempDir dir("corrupt");
    const auto [raw, y] = generate_volume(testing::small_synth(), 1);
    write_volume(dir / "v.mtsv", raw);
    const std::string good = read_file(dir / "v.mtsv");

    auto write_raw = [&](const std::string& bytes) {
        std::ofstream(dir / "bad.mtsv", std::ios::binary) << bytes;
        return dir / "bad.mtsv";
    };
    CHECK_THROWS_AS(read_volume(write_raw(good.substr(0, good.size() - 3))), FormatError);
    CHECK_THROWS_AS(read_volume(write_raw("XXXX" + good.substr(4))), FormatError);
    std::string versioned = good;
    versioned[4] = 9;
    CHECK_THROWS_AS(read_volume(write_raw(versioned)), UnsupportedVersionError);
    CHECK_THROWS_AS(read_volume(dir / "missing.mtsv"), FormatError);
    CHECK_THROWS_AS(read_label_map(dir / "v.mtsv"), FormatError);
}

TEST_CASE("manifests round-trip and reject overlaps") {
    testing::TempDir dir("manifest");
    DatasetManifest m;
    m.annotated.push_back({"volumes/a.mtsv", "labels/a.mtsl"});
    m.unannotated = {"volumes/u.mtsv"};
    m.generator_config = testing::small_synth(11);
    write_manifest(dir / "m.json", m);
    const DatasetManifest back = read_manifest(dir / "m.json");
    CHECK(back.annotated.size() == 1);
    CHECK(back.annotated[0].label_path == "labels/a.mtsl");
    CHECK(back.unannotated == m.unannotated);
    CHECK(back.generator_config.seed == 11);
    CHECK(back.split == Split::train);

    m.unannotated.push_back("volumes/a.mtsv");
    CHECK_THROWS_AS(write_manifest(dir / "bad.json", m), ConfigError);

    std::ofstream(dir / "typo.json") << R"({"format":"mtseg-manifest","version":1,"split":"train","annotated":[],)"
                                        R"("unannotated":[],"extra":1})";
    CHECK_THROWS_AS(read_manifest(dir / "typo.json"), FormatError);
}

TEST_CASE("load_dataset resolves paths against the manifest directory") {
    testing::TempDir dir("load");
    fs::create_directories(dir / "volumes");
    const SynthConfig c = testing::small_synth();
    const AnnotatedSample a = testing::make_annotated(c, 0);
    const UnannotatedSample u = testing::make_unannotated(c, 1);
    write_volume(dir / "volumes/a.mtsv", a.volume);
    write_label_map(dir / "volumes/a.mtsl", a.annotation);
    write_volume(dir / "volumes/u.mtsv", u.volume);
    DatasetManifest m;
    m.annotated.push_back({"volumes/a.mtsv", "volumes/a.mtsl"});
    m.unannotated = {"volumes/u.mtsv"};
    write_manifest(dir / "train.json", m);
    const LoadedDataset d = load_dataset(read_manifest(dir / "train.json"), dir.path());
    REQUIRE(d.annotated.size() == 1);
    CHECK(d.annotated[0].id == "a");
    CHECK(d.annotated[0].volume == a.volume);
    CHECK(d.annotated[0].annotation == a.annotation);
    CHECK(d.unannotated[0].volume == u.volume);
    CHECK_FALSE(d.unannotated[0].pseudo_lesion.has_value());
}

TEST_CASE("patch extraction follows the documented coordinate mapping") {
    const BackboneConfig cfg;
    const auto [raw, y] = generate_volume(testing::small_synth(), 2);
    const Volume v = normalize_intensity(raw);
    for (LoResMode mode : {LoResMode::mean_pool, LoResMode::decimate}) {
        const PatchGeometry g = patch_geometry(cfg, mode);
        const int d = g.downsample_factor;
        for (Index3 c : {Index3{10, 9, 6}, Index3{0, 0, 0}, Index3{19, 19, 11}}) {
            const PatchPair p = extract_patch_pair(v, &y, c, g);
            auto src = [&](int x, int yy, int z) { return v.voxels.contains(x, yy, z) ? v.voxels(x, yy, z) : 0.0f; };
            for (int x = 0; x < g.hi_patch.x; x += 3)
                for (int yy = 0; yy < g.hi_patch.y; yy += 4)
                    for (int z = 0; z < g.hi_patch.z; ++z)
                        CHECK(p.hi_res(x, yy, z) ==
                              src(c.x - g.hi_patch.x / 2 + x, c.y - g.hi_patch.y / 2 + yy, c.z - g.hi_patch.z / 2 + z));
            for (int j = 0; j < g.lo_patch.x; j += 2) {
                const int bx = c.x + d * (j - g.lo_patch.x / 2) - d / 2;
                const int by = c.y + d * (1 - g.lo_patch.y / 2) - d / 2;
                const int bz = c.z + d * (2 - g.lo_patch.z / 2) - d / 2;
                double expect = 0;
                if (mode == LoResMode::decimate) {
                    expect = src(bx + d / 2, by + d / 2, bz + d / 2);
                } else {
                    for (int a = 0; a < d; ++a)
                        for (int b = 0; b < d; ++b)
                            for (int e = 0; e < d; ++e) expect += src(bx + a, by + b, bz + e);
                    expect /= d * d * d;
                }
                CHECK(p.lo_res(j, 1, 2) == doctest::Approx(expect).epsilon(1e-6));
            }
            REQUIRE(p.target_window);
            const Index3 o = output_origin(c, g);
            CHECK(center_for_output_origin(o, g) == c);
            for (int x = 0; x < g.output.x; ++x)
                for (int z = 0; z < g.output.z; ++z) {
                    const int sx = o.x + x, sy = o.y + 3, sz = o.z + z;
                    const int want = y.labels.contains(sx, sy, sz) ? y.labels(sx, sy, sz) : 0;
                    CHECK(p.target_window->labels(x, 3, z) == want);
                }
        }
    }
}

TEST_CASE("output window is centered on the hi-res patch") {
    const PatchGeometry g = patch_geometry(BackboneConfig{});
    const Index3 o = output_origin(Index3{20, 20, 10}, g);
    CHECK(o == Index3{20 - 12 + 5, 20 - 12 + 5, 10 - 6 + 3});
}

TEST_CASE("balanced center sampling") {
    const AnnotatedSample s = testing::make_annotated(testing::small_synth(), 3);
    Rng rng(99);
    const auto centers = sample_training_centers(s.volume, s.annotation, 4000, rng);
    int lesion = 0;
    for (const auto& c : centers) {
        REQUIRE((*s.volume.mask)(c.x, c.y, c.z) == 1);
        lesion += s.annotation.labels(c.x, c.y, c.z) != 0;
    }
    CHECK(lesion / 4000.0 == doctest::Approx(0.5).epsilon(0.08));

    const LabelMap empty(s.volume.shape(), 2);
    for (const auto& c : sample_training_centers(s.volume, empty, 200, rng)) {
        CHECK((*s.volume.mask)(c.x, c.y, c.z) == 1);
    }
    CHECK_THROWS_AS(sample_training_centers(s.volume, LabelMap(Shape3{2, 2, 2}, 2), 1, rng), ShapeError);
}
