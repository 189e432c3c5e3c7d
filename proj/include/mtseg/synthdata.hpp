#pragma once

// Synthetic lesion volumes, intensity normalisation, on-disk formats,
// dataset manifests, patch extraction and balanced center sampling.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mtseg/backbone.hpp"
#include "mtseg/domain.hpp"

namespace mtseg {

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

struct SynthConfig {
    Shape3 volume_shape{48, 48, 24};
    std::array<int, 2> lesion_count_range{1, 4};
    // Ellipsoid semi-axes in voxels, [min, max] per axis.
    std::array<std::array<int, 2>, 3> lesion_radius_range{{{1, 5}, {1, 5}, {1, 3}}};
    double lesion_intensity_boost = 2.0;
    // Each lesion's boost is scaled by a uniform factor in 1 +- spread.
    double lesion_intensity_spread = 0.5;
    double background_noise_std = 1.0;
    int brain_ellipsoid_margin = 3;
    std::uint64_t seed = 7;

    void validate() const;
};

// Volume with an ellipsoidal brain mask, smooth tissue texture plus Gaussian
// noise, and bright ellipsoidal lesions (labelled 1). The returned volume is
// raw; callers normalise it. Deterministic in (cfg.seed, index).
std::pair<Volume, LabelMap> generate_volume(const SynthConfig& cfg, std::uint64_t index);

// Zero mean, unit standard deviation over the mask; zero outside it.
Volume normalize_intensity(const Volume& v);

// ---------------------------------------------------------------------------
// Files
//
// Volume ("MTSV"): magic, u8 version = 1, u32 nx, ny, nz (little endian),
// u8 mask flag, nx*ny*nz float32 voxels, then nx*ny*nz mask bytes if flagged.
// Label map ("MTSL"): magic, u8 version = 1, u32 nx, ny, nz, u8 num_classes,
// nx*ny*nz label bytes. Voxels are in canonical (x, y, z) order, z fastest.
// ---------------------------------------------------------------------------

inline constexpr std::uint8_t kVolumeFormatVersion = 1;

void write_volume(const std::filesystem::path& path, const Volume& v);
Volume read_volume(const std::filesystem::path& path);

void write_label_map(const std::filesystem::path& path, const LabelMap& y);
LabelMap read_label_map(const std::filesystem::path& path);

// Writes `bytes` to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

enum class Split { train, test };

struct AnnotatedEntry {
    std::string volume_path;
    std::string label_path;
};

struct DatasetManifest {
    std::vector<AnnotatedEntry> annotated;
    std::vector<std::string> unannotated;
    Split split = Split::train;
    SynthConfig generator_config;

    // Throws ConfigError when a path is listed both as annotated and unannotated.
    void validate() const;
};

// Paths inside the manifest are stored relative to the manifest's directory.
void write_manifest(const std::filesystem::path& path, const DatasetManifest& m);
DatasetManifest read_manifest(const std::filesystem::path& path);

struct LoadedDataset {
    std::vector<AnnotatedSample> annotated;
    std::vector<UnannotatedSample> unannotated;
};

// Resolves manifest paths against `base_dir` (the manifest's directory).
LoadedDataset load_dataset(const DatasetManifest& m, const std::filesystem::path& base_dir);

// ---------------------------------------------------------------------------
// Patches
// ---------------------------------------------------------------------------

enum class LoResMode { mean_pool, decimate };

std::string to_string(LoResMode m);
LoResMode lo_res_mode_from_string(const std::string& s);

struct PatchGeometry {
    Shape3 hi_patch;
    Shape3 lo_patch;
    int downsample_factor = 3;
    Shape3 output;  // network output window
    Shape3 margin;  // offset of the output window inside the hi-res patch
    LoResMode mode = LoResMode::mean_pool;
};

// Runs check_geometry; throws GeometryError for incompatible configurations.
PatchGeometry patch_geometry(const BackboneConfig& cfg, LoResMode mode = LoResMode::mean_pool);

// Hi-res voxel i on an axis maps to source voxel center - floor(p/2) + i.
// Lo-res voxel j averages (or, when decimating, samples the middle of) the
// D-voxel block starting at center + D*(j - floor(p/2)) - floor(D/2).
// Out-of-volume voxels read as 0. The optional `labels` map is cropped to
// the network output window.
PatchPair extract_patch_pair(const Volume& v, const LabelMap* labels, Index3 center,
                             const PatchGeometry& geometry);

// Source coordinate of output voxel (0, 0, 0) for a patch centered at `center`.
Index3 output_origin(Index3 center, const PatchGeometry& geometry);

// Inverse of output_origin: the center whose output window starts at `origin`.
Index3 center_for_output_origin(Index3 origin, const PatchGeometry& geometry);

// Each center is drawn by a fair coin between lesion voxels (label != 0) and
// non-lesion voxels inside the mask, then uniformly within that set. An empty
// lesion set sends every draw to the masked region.
std::vector<Index3> sample_training_centers(const Volume& v, const LabelMap& labels, std::size_t n,
                                            Rng& rng);

}  // namespace mtseg
