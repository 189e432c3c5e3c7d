#pragma once

// Dual-pathway multi-scale patch segmentation network.
//
// Both pathways run eight valid (unpadded) convolutions with identical layer
// settings. The low-resolution pathway sees a patch downsampled by
// `downsample_factor`; its features are upsampled by nearest-neighbour
// repetition, center-cropped to the high-resolution output extent and
// concatenated along channels. Two 1^3 layers and a final 1^3 classifier
// with a per-voxel softmax produce K probability maps.

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mtseg/domain.hpp"

namespace mtseg {

inline constexpr int kConvStages = 8;

enum class Activation { relu, leaky_relu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct BackboneConfig {
    std::vector<int> conv_filters{4, 4, 6, 6, 6, 6, 8, 8};
    // Per-layer (x, y, z) kernel extents, each 1 or 3. Layers whose axis
    // kernel is 1 do not shrink that axis.
    std::vector<std::array<int, 3>> conv_kernels{{3, 3, 3}, {3, 3, 3}, {3, 3, 3}, {3, 3, 1},
                                                 {3, 3, 1}, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}};
    std::vector<int> fc_filters{16, 16};
    int downsample_factor = 3;
    int num_classes = 2;
    Shape3 hi_patch{25, 25, 13};
    Shape3 lo_patch{15, 15, 9};
    Activation activation = Activation::leaky_relu;
    double leak = 0.01;
    std::uint64_t init_seed = 1;

    // Layer settings of the published full-size network: 30-50 filters,
    // all 3^3 kernels, two 250-wide 1^3 layers, 37x37x21 / 23x23x18 patches.
    static BackboneConfig full_scale();
};

struct GeometryReport {
    Shape3 hi_out;        // high-resolution pathway output
    Shape3 lo_out;        // low-resolution pathway output, before upsampling
    Shape3 lo_upsampled;  // lo_out * downsample_factor
    Shape3 crop_offset;   // floor((lo_upsampled - hi_out) / 2)
    Shape3 margin;        // per-axis voxels trimmed on each side by the valid convolutions
    Shape3 output;        // common output shape (== hi_out)
};

// Throws GeometryError naming every per-axis deficit when the pathways
// cannot be concatenated, or ConfigError for malformed layer lists.
GeometryReport check_geometry(const BackboneConfig& cfg);

// Fan-in scaled Gaussian kernels (std = sqrt(2 / fan_in)), zero biases.
ModelWeights init_weights(const BackboneConfig& cfg);

// Intermediate activations of one forward pass, retained for backpropagation.
class ForwardPass {
public:
    ForwardPass(ForwardPass&&) noexcept;
    ForwardPass& operator=(ForwardPass&&) noexcept;
    ~ForwardPass();

    [[nodiscard]] const ProbabilityMap& probabilities() const;

    // Accumulates d(loss)/d(weights) into `grads` given d(loss)/d(probabilities).
    void backward(const ProbabilityMap& upstream, Gradients& grads) const;

private:
    friend class Backbone;
    struct Tape;
    explicit ForwardPass(std::unique_ptr<Tape> tape);
    std::unique_ptr<Tape> tape_;
};

class Backbone {
public:
    explicit Backbone(BackboneConfig cfg);

    [[nodiscard]] const BackboneConfig& config() const { return cfg_; }
    [[nodiscard]] const GeometryReport& geometry() const { return geometry_; }
    [[nodiscard]] std::uint64_t schema_id() const { return schema_id_; }

    [[nodiscard]] ModelWeights init_weights() const { return mtseg::init_weights(cfg_); }

    [[nodiscard]] ProbabilityMap forward(const ModelWeights& w, const PatchPair& p) const;
    [[nodiscard]] ForwardPass forward_pass(const ModelWeights& w, const PatchPair& p) const;

    // Gradient of the scalar loss whose derivative with respect to the output
    // probabilities is `upstream`.
    [[nodiscard]] Gradients forward_with_gradients(const ModelWeights& w, const PatchPair& p,
                                                   const ProbabilityMap& upstream) const;

private:
    void check_inputs(const ModelWeights& w, const PatchPair& p) const;

    BackboneConfig cfg_;
    GeometryReport geometry_;
    std::uint64_t schema_id_ = 0;
};

}  // namespace mtseg
