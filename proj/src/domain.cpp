#include "mtseg/domain.hpp"

#include <cmath>
#include <algorithm>

namespace mtseg {

std::string to_string(const Shape3& s) {
    return std::to_string(s.x) + "x" + std::to_string(s.y) + "x" + std::to_string(s.z);
}

void Volume::validate() const {
    for (float v : voxels.values()) {
        if (!std::isfinite(v)) throw Error("volume contains a non-finite intensity");
    }
    if (mask && mask->shape() != voxels.shape()) {
        throw ShapeError("mask shape " + to_string(mask->shape()) + " differs from volume shape " +
                         to_string(voxels.shape()));
    }
}

LabelMap::LabelMap(Shape3 shape, int k, std::uint8_t fill) : labels(shape, fill), num_classes(k) {}

void LabelMap::validate() const {
    if (num_classes < 2 || num_classes > 255) {
        throw InvalidLabelError("number of classes must be in [2, 255], got " +
                                std::to_string(num_classes));
    }
    for (auto l : labels.values()) {
        if (l >= num_classes) {
            throw InvalidLabelError("label " + std::to_string(l) + " outside [0, " +
                                    std::to_string(num_classes - 1) + "]");
        }
    }
}

bool validate_probability_map(const ProbabilityMap& p) {
    if (p.num_classes < 1) return false;
    if (p.probs.size() != static_cast<std::size_t>(p.num_classes) * p.num_voxels()) return false;
    for (double v : p.probs) {
        if (!(v >= 0.0 && v <= 1.0)) return false;
    }
    const std::size_t nv = p.num_voxels();
    for (std::size_t v = 0; v < nv; ++v) {
        double sum = 0.0;
        for (int i = 0; i < p.num_classes; ++i) sum += p.at(i, v);
        if (std::abs(sum - 1.0) > kProbabilitySumTolerance) return false;
    }
    return true;
}

ProbabilityMap one_hot(const LabelMap& y) {
    y.validate();
    ProbabilityMap p(y.num_classes, y.shape(), 0.0);
    const auto labels = y.labels.values();
    for (std::size_t v = 0; v < labels.size(); ++v) p.at(labels[v], v) = 1.0;
    return p;
}

LabelMap argmax(const ProbabilityMap& p) {
    LabelMap out(p.shape, std::max(p.num_classes, 2));
    const std::size_t nv = p.num_voxels();
    for (std::size_t v = 0; v < nv; ++v) {
        int best = 0;
        double best_p = p.at(0, v);
        for (int i = 1; i < p.num_classes; ++i) {
            if (p.at(i, v) > best_p) {
                best = i;
                best_p = p.at(i, v);
            }
        }
        out.labels[v] = static_cast<std::uint8_t>(best);
    }
    return out;
}

void AnnotatedSample::validate() const {
    volume.validate();
    annotation.validate();
    if (annotation.shape() != volume.shape()) {
        throw ShapeError("annotation shape " + to_string(annotation.shape()) +
                         " differs from volume shape " + to_string(volume.shape()));
    }
}

void UnannotatedSample::validate() const {
    volume.validate();
    if (pseudo_lesion) {
        pseudo_lesion->validate();
        if (pseudo_lesion->shape() != volume.shape()) {
            throw ShapeError("pseudo-lesion shape differs from volume shape");
        }
    }
}

// ---------------------------------------------------------------------------

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

Rng derive_stream(std::uint64_t seed, std::string_view label, std::uint64_t index) {
    const std::uint64_t tag = fnv1a(label);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    return Rng(seq);
}

template <typename T>
std::uint64_t BasicWeights<T>::schema_id() const {
    std::uint64_t h = fnv1a("mtseg-weights");
    for (const auto& e : entries) {
        h = fnv1a(e.name, h);
        h = fnv1a("|", h);
        for (int d : e.dims) {
            h = fnv1a(std::to_string(d), h);
            h = fnv1a(",", h);
        }
        h = fnv1a(";", h);
    }
    return h;
}

template <typename T>
std::size_t BasicWeights<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.values.size();
    return n;
}

template <typename T>
bool BasicWeights<T>::all_finite() const {
    for (const auto& e : entries) {
        for (T v : e.values) {
            if (!std::isfinite(v)) return false;
        }
    }
    return true;
}

template <typename T>
ParamTensor<T>& BasicWeights<T>::find(std::string_view name) {
    for (auto& e : entries) {
        if (e.name == name) return e;
    }
    throw SchemaError("no parameter named '" + std::string(name) + "'");
}

template <typename T>
const ParamTensor<T>& BasicWeights<T>::find(std::string_view name) const {
    for (const auto& e : entries) {
        if (e.name == name) return e;
    }
    throw SchemaError("no parameter named '" + std::string(name) + "'");
}

template class BasicWeights<float>;
template class BasicWeights<double>;

}  // namespace mtseg
