#pragma once

#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "llreg/model.hpp"
#include "llreg/objective.hpp"
#include "llreg/synthgen.hpp"
#include "llreg/trainer.hpp"

namespace llreg {

/// Invalid configuration; the message starts with the offending field path.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    LossConfig loss;
    SynthConfig synth;
};

nlohmann::ordered_json to_json(const ModelConfig& c);
nlohmann::ordered_json to_json(const TrainConfig& c);
nlohmann::ordered_json to_json(const LossConfig& c);
nlohmann::ordered_json to_json(const SynthConfig& c);
nlohmann::ordered_json to_json(const RunConfig& c);

// Each reader overlays the keys present in `j` onto `base`, rejects unknown
// keys and validates the result. `path` prefixes error messages.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {}, const std::string& path = "model");
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}, const std::string& path = "train");
LossConfig loss_config_from_json(const nlohmann::json& j, LossConfig base = {}, const std::string& path = "loss");
SynthConfig synth_config_from_json(const nlohmann::json& j, SynthConfig base = {}, const std::string& path = "synth");
RunConfig run_config_from_json(const nlohmann::json& j);

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

/// "X,Y,Z" -> geometry.
VolumeGeometry parse_size(const std::string& s);

}  // namespace llreg
