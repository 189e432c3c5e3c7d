#pragma once

// JSON encoding of configuration structs. Decoding is strict: unknown keys
// raise ConfigError, missing keys keep their defaults.

#include <json.hpp>

#include <set>
#include <string>

#include "mtseg/backbone.hpp"
#include "mtseg/domain.hpp"
#include "mtseg/synthdata.hpp"

namespace mtseg {

using Json = nlohmann::json;

class StrictObject {
public:
    StrictObject(Json j, std::string context);

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(context_ + "." + key + ": " + e.what());
        }
    }

    // Returns the sub-object for `key` (or an empty object when absent).
    Json child(const char* key);

    [[nodiscard]] const std::string& context() const { return context_; }

    // Throws ConfigError listing every key that was never requested.
    void finish() const;

private:
    Json j_;
    std::string context_;
    std::set<std::string> seen_;
};

Json shape_to_json(const Shape3& s);
Shape3 shape_from_json(const Json& j, const std::string& context);

Json to_json(const SynthConfig& c);
SynthConfig synth_config_from_json(const Json& j, const std::string& context = "synth");

Json to_json(const BackboneConfig& c);
BackboneConfig backbone_config_from_json(const Json& j, const std::string& context = "backbone");

}  // namespace mtseg
