#include "mtseg/json_io.hpp"

namespace mtseg {

StrictObject::StrictObject(Json j, std::string context) : j_(std::move(j)), context_(std::move(context)) {
    if (!j_.is_object()) throw ConfigError(context_ + ": expected an object");
}

Json StrictObject::child(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return Json::object();
    const Json& c = j_.at(key);
    if (!c.is_object()) throw ConfigError(context_ + "." + key + ": expected an object");
    return c;
}

void StrictObject::finish() const {
    std::string unknown;
    for (const auto& [key, value] : j_.items()) {
        if (!seen_.count(key)) unknown += (unknown.empty() ? "" : ", ") + key;
    }
    if (!unknown.empty()) throw ConfigError(context_ + ": unknown key(s): " + unknown);
}

Json shape_to_json(const Shape3& s) { return Json::array({s.x, s.y, s.z}); }

Shape3 shape_from_json(const Json& j, const std::string& context) {
    if (!j.is_array() || j.size() != 3) {
        throw ConfigError(context + ": expected a 3-element array");
    }
    try {
        return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(context + ": " + e.what());
    }
}

Json to_json(const SynthConfig& c) {
    return {
        {"volume_shape", shape_to_json(c.volume_shape)},
        {"lesion_count_range", c.lesion_count_range},
        {"lesion_radius_range", c.lesion_radius_range},
        {"lesion_intensity_boost", c.lesion_intensity_boost},
        {"lesion_intensity_spread", c.lesion_intensity_spread},
        {"background_noise_std", c.background_noise_std},
        {"brain_ellipsoid_margin", c.brain_ellipsoid_margin},
        {"seed", c.seed},
    };
}

SynthConfig synth_config_from_json(const Json& j, const std::string& context) {
    SynthConfig c;
    StrictObject o(j, context);
    Json shape = shape_to_json(c.volume_shape);
    o.get("volume_shape", shape);
    c.volume_shape = shape_from_json(shape, context + ".volume_shape");
    o.get("lesion_count_range", c.lesion_count_range);
    o.get("lesion_radius_range", c.lesion_radius_range);
    o.get("lesion_intensity_boost", c.lesion_intensity_boost);
    o.get("lesion_intensity_spread", c.lesion_intensity_spread);
    o.get("background_noise_std", c.background_noise_std);
    o.get("brain_ellipsoid_margin", c.brain_ellipsoid_margin);
    o.get("seed", c.seed);
    o.finish();
    c.validate();
    return c;
}

Json to_json(const BackboneConfig& c) {
    return {
        {"conv_filters", c.conv_filters},
        {"conv_kernels", c.conv_kernels},
        {"fc_filters", c.fc_filters},
        {"downsample_factor", c.downsample_factor},
        {"num_classes", c.num_classes},
        {"hi_patch", shape_to_json(c.hi_patch)},
        {"lo_patch", shape_to_json(c.lo_patch)},
        {"activation", to_string(c.activation)},
        {"leak", c.leak},
        {"init_seed", c.init_seed},
    };
}

BackboneConfig backbone_config_from_json(const Json& j, const std::string& context) {
    BackboneConfig c;
    StrictObject o(j, context);
    o.get("conv_filters", c.conv_filters);
    o.get("conv_kernels", c.conv_kernels);
    o.get("fc_filters", c.fc_filters);
    o.get("downsample_factor", c.downsample_factor);
    o.get("num_classes", c.num_classes);
    Json hi = shape_to_json(c.hi_patch);
    Json lo = shape_to_json(c.lo_patch);
    o.get("hi_patch", hi);
    o.get("lo_patch", lo);
    c.hi_patch = shape_from_json(hi, context + ".hi_patch");
    c.lo_patch = shape_from_json(lo, context + ".lo_patch");
    std::string act = to_string(c.activation);
    o.get("activation", act);
    c.activation = activation_from_string(act);
    o.get("leak", c.leak);
    o.get("init_seed", c.init_seed);
    o.finish();
    try {
        check_geometry(c);
    } catch (const GeometryError& e) {
        throw ConfigError(context + ": " + e.what());
    }
    return c;
}

}  // namespace mtseg
