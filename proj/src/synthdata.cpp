#include "mtseg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "bytes.hpp"
#include "mtseg/json_io.hpp"

namespace mtseg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

void SynthConfig::validate() const {
    const Shape3& s = volume_shape;
    if (s.x < 1 || s.y < 1 || s.z < 1) throw ConfigError("volume shape must be positive");
    if (lesion_count_range[0] < 0 || lesion_count_range[0] > lesion_count_range[1]) {
        throw ConfigError("lesion_count_range must be a nonempty nonnegative interval");
    }
    if (brain_ellipsoid_margin < 0) throw ConfigError("brain_ellipsoid_margin must be >= 0");
    if (background_noise_std < 0.0) throw ConfigError("background_noise_std must be >= 0");
    if (lesion_intensity_spread < 0.0 || lesion_intensity_spread > 1.0) {
        throw ConfigError("lesion_intensity_spread must lie in [0, 1]");
    }
    for (int a = 0; a < 3; ++a) {
        const auto& r = lesion_radius_range[a];
        if (r[0] < 1 || r[0] > r[1]) {
            throw ConfigError("lesion_radius_range must be nonempty intervals of positive radii");
        }
        const int semi = s[a] / 2 - brain_ellipsoid_margin;
        if (semi < 1) {
            throw ConfigError("volume extent " + std::to_string(s[a]) +
                              " is too small for brain margin " +
                              std::to_string(brain_ellipsoid_margin));
        }
        if (r[1] >= semi) {
            throw ConfigError("lesion radius " + std::to_string(r[1]) +
                              " does not fit inside the brain ellipsoid");
        }
    }
}

std::pair<Volume, LabelMap> generate_volume(const SynthConfig& cfg, std::uint64_t index) {
    cfg.validate();
    Rng rng = derive_stream(cfg.seed, "synth-volume", index);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    const Shape3 s = cfg.volume_shape;
    std::array<double, 3> center{}, semi{};
    for (int a = 0; a < 3; ++a) {
        center[a] = (s[a] - 1) / 2.0;
        semi[a] = s[a] / 2.0 - cfg.brain_ellipsoid_margin;
    }

    // Smooth tissue texture: a few low-frequency plane waves.
    struct Wave {
        std::array<double, 3> k;
        double phase, amp;
    };
    std::vector<Wave> waves(3);
    for (auto& w : waves) {
        for (int a = 0; a < 3; ++a) {
            w.k[a] = (unit(rng) * 2.0 - 1.0) * 2.0 * std::numbers::pi / s[a] * 1.5;
        }
        w.phase = unit(rng) * 2.0 * std::numbers::pi;
        w.amp = 0.2 + 0.2 * unit(rng);
    }

    Volume vol{Grid3<float>(s), Mask(s)};
    LabelMap labels(s, 2);
    for (int x = 0; x < s.x; ++x) {
        for (int y = 0; y < s.y; ++y) {
            for (int z = 0; z < s.z; ++z) {
                const double dx = (x - center[0]) / semi[0];
                const double dy = (y - center[1]) / semi[1];
                const double dz = (z - center[2]) / semi[2];
                const bool inside = dx * dx + dy * dy + dz * dz <= 1.0;
                double value = 0.0;
                if (inside) {
                    value = 1.0;
                    for (const auto& w : waves) {
                        value += w.amp * std::cos(w.k[0] * x + w.k[1] * y + w.k[2] * z + w.phase);
                    }
                }
                value += cfg.background_noise_std * normal(rng);
                vol.voxels(x, y, z) = static_cast<float>(value);
                (*vol.mask)(x, y, z) = inside ? 1 : 0;
            }
        }
    }

    std::uniform_int_distribution<int> count_dist(cfg.lesion_count_range[0], cfg.lesion_count_range[1]);
    const int n_lesions = count_dist(rng);
    for (int l = 0; l < n_lesions; ++l) {
        std::array<int, 3> radius{};
        for (int a = 0; a < 3; ++a) {
            std::uniform_int_distribution<int> rd(cfg.lesion_radius_range[a][0],
                                                  cfg.lesion_radius_range[a][1]);
            radius[a] = rd(rng);
        }
        // Lesion center uniformly inside the brain ellipsoid shrunk by the radii.
        std::array<double, 3> lc{};
        for (;;) {
            std::array<double, 3> u{};
            for (int a = 0; a < 3; ++a) u[a] = unit(rng) * 2.0 - 1.0;
            if (u[0] * u[0] + u[1] * u[1] + u[2] * u[2] > 1.0) continue;
            for (int a = 0; a < 3; ++a) {
                lc[a] = center[a] + u[a] * std::max(0.0, semi[a] - radius[a]);
            }
            break;
        }
        const double spread = cfg.lesion_intensity_spread * (2.0 * unit(rng) - 1.0);
        const double boost = cfg.lesion_intensity_boost * (1.0 + spread);
        for (int x = 0; x < s.x; ++x) {
            for (int y = 0; y < s.y; ++y) {
                for (int z = 0; z < s.z; ++z) {
                    const double dx = (x - lc[0]) / radius[0];
                    const double dy = (y - lc[1]) / radius[1];
                    const double dz = (z - lc[2]) / radius[2];
                    if (dx * dx + dy * dy + dz * dz > 1.0 || !(*vol.mask)(x, y, z)) continue;
                    if (labels.labels(x, y, z) == 0) {
                        vol.voxels(x, y, z) += static_cast<float>(boost);
                        labels.labels(x, y, z) = 1;
                    }
                }
            }
        }
    }
    return {std::move(vol), std::move(labels)};
}

Volume normalize_intensity(const Volume& v) {
    v.validate();
    if (!v.mask) throw DegenerateMaskError("intensity normalisation needs a brain mask");
    const auto voxels = v.voxels.values();
    const auto mask = v.mask->values();
    std::size_t n = 0;
    double sum = 0.0;
    for (std::size_t i = 0; i < voxels.size(); ++i) {
        if (mask[i]) {
            sum += voxels[i];
            ++n;
        }
    }
    if (n == 0) throw DegenerateMaskError("brain mask is empty");
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < voxels.size(); ++i) {
        if (mask[i]) ss += (voxels[i] - mean) * (voxels[i] - mean);
    }
    const double sd = std::sqrt(ss / static_cast<double>(n));
    if (!(sd > 0.0)) throw DegenerateIntensityError("intensity has zero variance inside the mask");

    Volume out{Grid3<float>(v.shape()), v.mask};
    auto dst = out.voxels.values();
    for (std::size_t i = 0; i < voxels.size(); ++i) {
        dst[i] = mask[i] ? static_cast<float>((voxels[i] - mean) / sd) : 0.0f;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

namespace {

using ByteReader = bytes::Reader<FormatError>;

void expect_magic(ByteReader& r, const char* magic, const std::string& what) {
    if (r.remaining() < 4 || r.raw(4) != magic) throw FormatError(what + ": bad magic bytes");
    const std::uint8_t version = r.u8();
    if (version != kVolumeFormatVersion) {
        throw UnsupportedVersionError(what + ": unsupported format version " + std::to_string(version));
    }
}

Shape3 read_dims(ByteReader& r, const std::string& what) {
    Shape3 s;
    s.x = static_cast<int>(r.u32());
    s.y = static_cast<int>(r.u32());
    s.z = static_cast<int>(r.u32());
    if (s.x < 0 || s.y < 0 || s.z < 0 || s.volume() > (std::size_t{1} << 32)) {
        throw FormatError(what + ": implausible dimensions");
    }
    return s;
}

void write_header(bytes::Writer& w, const char* magic, const Shape3& s) {
    w.raw(magic);
    w.u8(kVolumeFormatVersion);
    w.u32(static_cast<std::uint32_t>(s.x));
    w.u32(static_cast<std::uint32_t>(s.y));
    w.u32(static_cast<std::uint32_t>(s.z));
}

}  // namespace

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

void write_volume(const fs::path& path, const Volume& v) {
    v.validate();
    bytes::Writer w;
    w.reserve(18 + v.shape().volume() * 5);
    write_header(w, "MTSV", v.shape());
    w.u8(v.mask ? 1 : 0);
    for (float f : v.voxels.values()) w.f32(f);
    if (v.mask) {
        for (auto m : v.mask->values()) w.u8(m);
    }
    write_file_atomic(path, w.data());
}

Volume read_volume(const fs::path& path) {
    const std::string bytes = read_file(path);
    const std::string what = "volume " + path.string();
    ByteReader r(bytes, what);
    expect_magic(r, "MTSV", what);
    const Shape3 s = read_dims(r, what);
    const std::uint8_t has_mask = r.u8();
    if (has_mask > 1) throw FormatError(what + ": bad mask flag");
    const std::size_t n = s.volume();
    const std::size_t expected = n * 4 + (has_mask ? n : 0);
    if (r.remaining() != expected) {
        throw FormatError(what + ": payload size " + std::to_string(r.remaining()) +
                          " does not match shape " + to_string(s));
    }
    Volume v{Grid3<float>(s), std::nullopt};
    for (float& f : v.voxels.values()) f = r.f32();
    if (has_mask) {
        Mask m(s);
        for (auto& b : m.values()) b = r.u8();
        v.mask = std::move(m);
    }
    return v;
}

void write_label_map(const fs::path& path, const LabelMap& y) {
    y.validate();
    bytes::Writer w;
    write_header(w, "MTSL", y.shape());
    w.u8(static_cast<std::uint8_t>(y.num_classes));
    for (auto l : y.labels.values()) w.u8(l);
    write_file_atomic(path, w.data());
}

LabelMap read_label_map(const fs::path& path) {
    const std::string bytes = read_file(path);
    const std::string what = "label map " + path.string();
    ByteReader r(bytes, what);
    expect_magic(r, "MTSL", what);
    const Shape3 s = read_dims(r, what);
    const int k = r.u8();
    if (r.remaining() != s.volume()) {
        throw FormatError(what + ": payload size does not match shape " + to_string(s));
    }
    LabelMap y(s, k);
    for (auto& l : y.labels.values()) l = r.u8();
    try {
        y.validate();
    } catch (const InvalidLabelError& e) {
        throw FormatError(what + ": " + e.what());
    }
    return y;
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

void DatasetManifest::validate() const {
    std::set<std::string> annotated_paths;
    for (const auto& e : annotated) {
        annotated_paths.insert(e.volume_path);
        annotated_paths.insert(e.label_path);
    }
    for (const auto& p : unannotated) {
        if (annotated_paths.count(p)) {
            throw ConfigError("path '" + p + "' is listed as both annotated and unannotated");
        }
    }
}

void write_manifest(const fs::path& path, const DatasetManifest& m) {
    m.validate();
    Json j;
    j["format"] = "mtseg-manifest";
    j["version"] = 1;
    j["split"] = m.split == Split::train ? "train" : "test";
    j["annotated"] = Json::array();
    for (const auto& e : m.annotated) {
        j["annotated"].push_back({{"volume", e.volume_path}, {"labels", e.label_path}});
    }
    j["unannotated"] = m.unannotated;
    j["generator_config"] = to_json(m.generator_config);
    write_file_atomic(path, j.dump(2) + "\n");
}

DatasetManifest read_manifest(const fs::path& path) {
    Json j;
    try {
        j = Json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("manifest " + path.string() + ": " + e.what());
    }
    DatasetManifest m;
    try {
        StrictObject o(j, "manifest");
        std::string format, split;
        int version = 0;
        Json annotated = Json::array(), unannotated = Json::array();
        o.get("format", format);
        o.get("version", version);
        o.get("split", split);
        o.get("annotated", annotated);
        o.get("unannotated", unannotated);
        const Json gen = o.child("generator_config");
        o.finish();
        if (format != "mtseg-manifest") throw FormatError("manifest: unexpected format tag");
        if (version != 1) throw UnsupportedVersionError("manifest: unsupported version");
        if (split == "train") {
            m.split = Split::train;
        } else if (split == "test") {
            m.split = Split::test;
        } else {
            throw FormatError("manifest: split must be train or test");
        }
        for (const auto& e : annotated) {
            AnnotatedEntry entry;
            StrictObject eo(e, "manifest.annotated[]");
            eo.get("volume", entry.volume_path);
            eo.get("labels", entry.label_path);
            eo.finish();
            m.annotated.push_back(entry);
        }
        m.unannotated = unannotated.get<std::vector<std::string>>();
        m.generator_config = synth_config_from_json(gen, "manifest.generator_config");
    } catch (const ConfigError& e) {
        throw FormatError(path.string() + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    m.validate();
    return m;
}

LoadedDataset load_dataset(const DatasetManifest& m, const fs::path& base_dir) {
    LoadedDataset d;
    for (const auto& e : m.annotated) {
        AnnotatedSample s{fs::path(e.volume_path).stem().string(), read_volume(base_dir / e.volume_path),
                          read_label_map(base_dir / e.label_path)};
        s.validate();
        d.annotated.push_back(std::move(s));
    }
    for (const auto& p : m.unannotated) {
        UnannotatedSample s{fs::path(p).stem().string(), read_volume(base_dir / p), std::nullopt};
        s.validate();
        d.unannotated.push_back(std::move(s));
    }
    return d;
}

// ---------------------------------------------------------------------------
// Patches
// ---------------------------------------------------------------------------

std::string to_string(LoResMode m) { return m == LoResMode::mean_pool ? "mean_pool" : "decimate"; }

LoResMode lo_res_mode_from_string(const std::string& s) {
    if (s == "mean_pool") return LoResMode::mean_pool;
    if (s == "decimate") return LoResMode::decimate;
    throw ConfigError("unknown low-resolution mode '" + s + "' (expected mean_pool or decimate)");
}

PatchGeometry patch_geometry(const BackboneConfig& cfg, LoResMode mode) {
    const GeometryReport g = check_geometry(cfg);
    return {cfg.hi_patch, cfg.lo_patch, cfg.downsample_factor, g.output, g.margin, mode};
}

Index3 output_origin(Index3 c, const PatchGeometry& g) {
    return {c.x - g.hi_patch.x / 2 + g.margin.x, c.y - g.hi_patch.y / 2 + g.margin.y,
            c.z - g.hi_patch.z / 2 + g.margin.z};
}

Index3 center_for_output_origin(Index3 o, const PatchGeometry& g) {
    return {o.x + g.hi_patch.x / 2 - g.margin.x, o.y + g.hi_patch.y / 2 - g.margin.y,
            o.z + g.hi_patch.z / 2 - g.margin.z};
}

PatchPair extract_patch_pair(const Volume& v, const LabelMap* labels, Index3 c, const PatchGeometry& g) {
    for (int a = 0; a < 3; ++a) {
        if (g.output[a] < 1 || g.hi_patch[a] - 2 * g.margin[a] != g.output[a] ||
            g.lo_patch[a] - 2 * g.margin[a] < 1 ||
            (g.lo_patch[a] - 2 * g.margin[a]) * g.downsample_factor < g.output[a]) {
            throw GeometryError("patch geometry violates the backbone alignment constraint");
        }
    }
    if (labels && labels->shape() != v.shape()) throw ShapeError("label map shape differs from volume");

    const Grid3<float>& src = v.voxels;
    auto at = [&](int x, int y, int z) -> float { return src.contains(x, y, z) ? src(x, y, z) : 0.0f; };

    PatchPair p;
    p.center = c;
    p.hi_res = Grid3<float>(g.hi_patch);
    const Index3 hs{c.x - g.hi_patch.x / 2, c.y - g.hi_patch.y / 2, c.z - g.hi_patch.z / 2};
    for (int x = 0; x < g.hi_patch.x; ++x) {
        for (int y = 0; y < g.hi_patch.y; ++y) {
            for (int z = 0; z < g.hi_patch.z; ++z) p.hi_res(x, y, z) = at(hs.x + x, hs.y + y, hs.z + z);
        }
    }

    const int d = g.downsample_factor;
    p.lo_res = Grid3<float>(g.lo_patch);
    const double inv = 1.0 / (static_cast<double>(d) * d * d);
    for (int x = 0; x < g.lo_patch.x; ++x) {
        const int bx = c.x + d * (x - g.lo_patch.x / 2) - d / 2;
        for (int y = 0; y < g.lo_patch.y; ++y) {
            const int by = c.y + d * (y - g.lo_patch.y / 2) - d / 2;
            for (int z = 0; z < g.lo_patch.z; ++z) {
                const int bz = c.z + d * (z - g.lo_patch.z / 2) - d / 2;
                if (g.mode == LoResMode::decimate) {
                    p.lo_res(x, y, z) = at(bx + d / 2, by + d / 2, bz + d / 2);
                    continue;
                }
                double sum = 0.0;
                for (int i = 0; i < d; ++i) {
                    for (int j = 0; j < d; ++j) {
                        for (int k = 0; k < d; ++k) sum += at(bx + i, by + j, bz + k);
                    }
                }
                p.lo_res(x, y, z) = static_cast<float>(sum * inv);
            }
        }
    }

    if (labels) {
        const Index3 o = output_origin(c, g);
        LabelMap window(g.output, labels->num_classes);
        for (int x = 0; x < g.output.x; ++x) {
            for (int y = 0; y < g.output.y; ++y) {
                for (int z = 0; z < g.output.z; ++z) {
                    const int sx = o.x + x, sy = o.y + y, sz = o.z + z;
                    window.labels(x, y, z) =
                        labels->labels.contains(sx, sy, sz) ? labels->labels(sx, sy, sz) : 0;
                }
            }
        }
        p.target_window = std::move(window);
    }
    return p;
}

std::vector<Index3> sample_training_centers(const Volume& v, const LabelMap& labels, std::size_t n,
                                            Rng& rng) {
    if (labels.shape() != v.shape()) throw ShapeError("label map shape differs from volume");
    if (n < 1) throw PreconditionError("at least one center must be requested");
    const Shape3 s = v.shape();
    std::vector<Index3> lesion, healthy;
    std::size_t masked = 0;
    for (int x = 0; x < s.x; ++x) {
        for (int y = 0; y < s.y; ++y) {
            for (int z = 0; z < s.z; ++z) {
                const bool in_mask = !v.mask || (*v.mask)(x, y, z);
                masked += in_mask ? 1 : 0;
                if (labels.labels(x, y, z) != 0) {
                    lesion.push_back({x, y, z});
                } else if (in_mask) {
                    healthy.push_back({x, y, z});
                }
            }
        }
    }
    if (masked == 0) throw DegenerateMaskError("cannot sample centers from an empty mask");

    std::bernoulli_distribution coin(0.5);
    std::vector<Index3> centers;
    centers.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const bool want_lesion = coin(rng);
        const std::vector<Index3>* pool = want_lesion ? &lesion : &healthy;
        if (pool->empty()) pool = want_lesion ? &healthy : &lesion;
        std::uniform_int_distribution<std::size_t> pick(0, pool->size() - 1);
        centers.push_back((*pool)[pick(rng)]);
    }
    return centers;
}

}  // namespace mtseg
