#pragma once

// Core value types shared by every module: grids, volumes, label and
// probability maps, patch pairs and named weight collections.
//
// Every 3D array is stored in canonical (x, y, z) order with z fastest;
// channel-major layouts put the channel axis in front of that.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mtseg {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define MTSEG_DEFINE_ERROR(Name, Base)      \
    class Name : public Base {              \
    public:                                 \
        using Base::Base;                   \
    };

MTSEG_DEFINE_ERROR(ConfigError, Error)
MTSEG_DEFINE_ERROR(InvalidLabelError, Error)
MTSEG_DEFINE_ERROR(ShapeError, Error)
MTSEG_DEFINE_ERROR(GeometryError, Error)
MTSEG_DEFINE_ERROR(DegenerateMaskError, Error)
MTSEG_DEFINE_ERROR(DegenerateIntensityError, Error)
MTSEG_DEFINE_ERROR(FormatError, Error)
MTSEG_DEFINE_ERROR(UnsupportedVersionError, FormatError)
MTSEG_DEFINE_ERROR(PreconditionError, Error)
MTSEG_DEFINE_ERROR(SchemaError, Error)
MTSEG_DEFINE_ERROR(CheckpointError, Error)
MTSEG_DEFINE_ERROR(DivergenceError, Error)
MTSEG_DEFINE_ERROR(SampleSizeError, Error)
MTSEG_DEFINE_ERROR(PairingError, Error)

#undef MTSEG_DEFINE_ERROR

// ---------------------------------------------------------------------------
// Shapes and grids
// ---------------------------------------------------------------------------

struct Shape3 {
    int x = 0;
    int y = 0;
    int z = 0;

    [[nodiscard]] std::size_t volume() const {
        return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) *
               static_cast<std::size_t>(z);
    }
    [[nodiscard]] int operator[](int axis) const { return axis == 0 ? x : axis == 1 ? y : z; }
    int& operator[](int axis) { return axis == 0 ? x : axis == 1 ? y : z; }

    friend bool operator==(const Shape3&, const Shape3&) = default;
};

std::string to_string(const Shape3& s);

struct Index3 {
    int x = 0;
    int y = 0;
    int z = 0;

    friend bool operator==(const Index3&, const Index3&) = default;
};

template <typename T>
class Grid3 {
public:
    Grid3() = default;
    explicit Grid3(Shape3 shape, T fill = T{}) : shape_(checked(shape)), data_(shape.volume(), fill) {}

    [[nodiscard]] const Shape3& shape() const { return shape_; }
    [[nodiscard]] std::size_t size() const { return data_.size(); }

    [[nodiscard]] std::size_t index(int x, int y, int z) const {
        return (static_cast<std::size_t>(x) * static_cast<std::size_t>(shape_.y) +
                static_cast<std::size_t>(y)) *
                   static_cast<std::size_t>(shape_.z) +
               static_cast<std::size_t>(z);
    }
    [[nodiscard]] bool contains(int x, int y, int z) const {
        return x >= 0 && y >= 0 && z >= 0 && x < shape_.x && y < shape_.y && z < shape_.z;
    }

    T& operator()(int x, int y, int z) { return data_[index(x, y, z)]; }
    const T& operator()(int x, int y, int z) const { return data_[index(x, y, z)]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    [[nodiscard]] std::span<T> values() { return data_; }
    [[nodiscard]] std::span<const T> values() const { return data_; }

    friend bool operator==(const Grid3&, const Grid3&) = default;

private:
    static Shape3 checked(Shape3 s) {
        if (s.x < 0 || s.y < 0 || s.z < 0) throw ShapeError("negative grid extent " + to_string(s));
        return s;
    }

    Shape3 shape_{};
    std::vector<T> data_;
};

using Mask = Grid3<std::uint8_t>;

// ---------------------------------------------------------------------------
// Volumes and maps
// ---------------------------------------------------------------------------

struct Volume {
    Grid3<float> voxels;
    std::optional<Mask> mask;

    [[nodiscard]] const Shape3& shape() const { return voxels.shape(); }

    // Throws ShapeError / Error when an invariant is broken.
    void validate() const;

    friend bool operator==(const Volume&, const Volume&) = default;
};

struct LabelMap {
    Grid3<std::uint8_t> labels;
    int num_classes = 2;

    LabelMap() = default;
    LabelMap(Shape3 shape, int k, std::uint8_t fill = 0);

    [[nodiscard]] const Shape3& shape() const { return labels.shape(); }

    // Throws InvalidLabelError for out-of-range entries or K < 2.
    void validate() const;

    friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

// Per-class probabilities laid out as (channel, x, y, z).
struct ProbabilityMap {
    int num_classes = 0;
    Shape3 shape{};
    std::vector<double> probs;

    ProbabilityMap() = default;
    ProbabilityMap(int k, Shape3 s, double fill = 0.0)
        : num_classes(k), shape(s), probs(static_cast<std::size_t>(k) * s.volume(), fill) {}

    [[nodiscard]] std::size_t num_voxels() const { return shape.volume(); }
    double& at(int cls, std::size_t voxel) { return probs[cls * num_voxels() + voxel]; }
    [[nodiscard]] double at(int cls, std::size_t voxel) const {
        return probs[cls * num_voxels() + voxel];
    }
    [[nodiscard]] std::span<const double> channel(int cls) const {
        return std::span<const double>(probs).subspan(cls * num_voxels(), num_voxels());
    }
};

inline constexpr double kProbabilitySumTolerance = 1e-6;

bool validate_probability_map(const ProbabilityMap& p);

ProbabilityMap one_hot(const LabelMap& y);

// Per-voxel argmax; ties go to the lowest class index.
LabelMap argmax(const ProbabilityMap& p);

struct AnnotatedSample {
    std::string id;
    Volume volume;
    LabelMap annotation;

    void validate() const;
};

struct UnannotatedSample {
    std::string id;
    Volume volume;
    std::optional<LabelMap> pseudo_lesion;

    void validate() const;
};

struct PatchPair {
    Grid3<float> hi_res;
    Grid3<float> lo_res;
    std::optional<LabelMap> target_window;
    Index3 center;
};

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

template <typename T>
struct ParamTensor {
    std::string name;
    std::vector<int> dims;
    std::vector<T> values;

    friend bool operator==(const ParamTensor&, const ParamTensor&) = default;
};

// Ordered named parameter tensors. Weights are float32; gradients and other
// accumulations over the same schema use double.
template <typename T>
class BasicWeights {
public:
    std::vector<ParamTensor<T>> entries;

    [[nodiscard]] std::uint64_t schema_id() const;
    [[nodiscard]] std::size_t parameter_count() const;
    [[nodiscard]] bool all_finite() const;

    ParamTensor<T>& find(std::string_view name);
    [[nodiscard]] const ParamTensor<T>& find(std::string_view name) const;

    // Same schema, all values zero.
    template <typename U>
    [[nodiscard]] BasicWeights<U> zeros_like() const {
        BasicWeights<U> out;
        out.entries.reserve(entries.size());
        for (const auto& e : entries) {
            out.entries.push_back({e.name, e.dims, std::vector<U>(e.values.size(), U{})});
        }
        return out;
    }

    // Visits (flat index across all entries, value reference) pairs.
    template <typename F>
    void for_each_value(F&& f) {
        std::size_t flat = 0;
        for (auto& e : entries) {
            for (auto& v : e.values) f(flat++, v);
        }
    }

    friend bool operator==(const BasicWeights&, const BasicWeights&) = default;
};

using ModelWeights = BasicWeights<float>;
using Gradients = BasicWeights<double>;

// Throws SchemaError unless both collections share names and shapes.
template <typename A, typename B>
void require_same_schema(const BasicWeights<A>& a, const BasicWeights<B>& b) {
    if (a.schema_id() != b.schema_id()) {
        throw SchemaError("weight schemas differ");
    }
}

extern template class BasicWeights<float>;
extern template class BasicWeights<double>;

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

// 64-bit FNV-1a; stable across platforms, used for schema ids, stream labels
// and file checksums.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

// Independent stream keyed by (seed, label, index). Distinct labels give
// distinct seed sequences, so e.g. student and teacher noise never share draws.
Rng derive_stream(std::uint64_t seed, std::string_view label, std::uint64_t index = 0);

}  // namespace mtseg
