#include "llreg/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace llreg {

namespace {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

void reject_unknown(const json& j, const std::string& path, std::initializer_list<const char*> known) {
    if (!j.is_object()) throw ConfigError(path + ": expected an object");
    const std::set<std::string> allowed(known.begin(), known.end());
    for (const auto& [k, v] : j.items())
        if (!allowed.count(k)) throw ConfigError(path + "." + k + ": unknown key");
}

template <typename T>
void read(const json& j, const std::string& path, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(path + "." + key + ": wrong type");
    }
}

void read_uint(const json& j, const std::string& path, const char* key, uint64_t& out) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_number_unsigned()) {
        if (v.is_number_integer()) throw ConfigError(path + "." + key + ": must be >= 0");
        throw ConfigError(path + "." + key + ": wrong type");
    }
    out = v.get<uint64_t>();
}

void read_geometry(const json& j, const std::string& path, const char* key, VolumeGeometry& out) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    const std::string p = path + "." + key;
    if (v.is_string()) {
        try {
            out = parse_size(v.get<std::string>());
        } catch (const std::invalid_argument& e) {
            throw ConfigError(p + ": " + e.what());
        }
        return;
    }
    if (!v.is_array() || v.size() != 3) throw ConfigError(p + ": expected [nx, ny, nz]");
    for (const auto& x : v)
        if (!x.is_number_integer() || x.get<int64_t>() < 1) throw ConfigError(p + ": extents must be positive integers");
    out = {v[0].get<int64_t>(), v[1].get<int64_t>(), v[2].get<int64_t>()};
}

template <typename F>
void validated(const std::string& path, F&& f) {
    try {
        f();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

json geometry_json(const VolumeGeometry& g) { return json::array({g.nx, g.ny, g.nz}); }

}  // namespace

VolumeGeometry parse_size(const std::string& s) {
    std::istringstream in(s);
    std::string part;
    std::vector<int64_t> v;
    while (std::getline(in, part, ',')) {
        size_t used = 0;
        long long x = 0;
        try {
            x = std::stoll(part, &used);
        } catch (const std::exception&) {
            throw std::invalid_argument("size must be X,Y,Z with positive integers, got '" + s + "'");
        }
        if (used != part.size() || x < 1)
            throw std::invalid_argument("size must be X,Y,Z with positive integers, got '" + s + "'");
        v.push_back(x);
    }
    if (v.size() != 3) throw std::invalid_argument("size must be X,Y,Z with positive integers, got '" + s + "'");
    return {v[0], v[1], v[2]};
}

ojson to_json(const ModelConfig& c) {
    ojson j;
    j["base_channels"] = c.base_channels;
    j["d_model"] = c.d_model;
    j["heads"] = c.heads;
    j["stack_depth"] = c.stack_depth;
    j["inner_multiple"] = c.inner_multiple;
    j["causal_mask"] = c.causal_mask;
    j["use_pos_embed"] = c.use_pos_embed;
    j["bottleneck_mode"] = to_string(c.bottleneck_mode);
    j["cascade_steps"] = c.cascade_steps;
    j["volume"] = geometry_json(c.volume);
    j["shared_encoder"] = c.shared_encoder;
    char slope[32];
    std::snprintf(slope, sizeof slope, "%.9g", double(c.leaky_slope));
    j["leaky_slope"] = std::stod(slope);
    j["seed"] = c.seed;
    j["bottleneck_seed"] = c.bottleneck_seed;
    return j;
}

ojson to_json(const TrainConfig& c) {
    ojson j;
    j["lr"] = c.lr;
    j["steps"] = c.steps;
    j["seed"] = c.seed;
    j["phase"] = c.phase.str();
    j["log_every"] = c.log_every;
    j["deterministic"] = c.deterministic;
    return j;
}

ojson to_json(const LossConfig& c) {
    ojson j;
    j["lambda"] = c.lambda;
    j["deep_supervision"] = c.deep_supervision;
    j["deep_supervision_weight"] = c.deep_supervision_weight;
    return j;
}

ojson to_json(const SynthConfig& c) {
    ojson j;
    j["size"] = geometry_json(c.size);
    j["count"] = c.count;
    j["seed"] = c.seed;
    j["max_disp"] = c.max_disp;
    j["smooth_sigma"] = c.smooth_sigma;
    j["n_shapes"] = c.n_shapes;
    return j;
}

ojson to_json(const RunConfig& c) {
    ojson j;
    j["model"] = to_json(c.model);
    j["train"] = to_json(c.train);
    j["loss"] = to_json(c.loss);
    j["synth"] = to_json(c.synth);
    return j;
}

ModelConfig model_config_from_json(const json& j, ModelConfig c, const std::string& path) {
    reject_unknown(j, path,
                   {"base_channels", "d_model", "heads", "stack_depth", "inner_multiple", "causal_mask",
                    "use_pos_embed", "bottleneck_mode", "cascade_steps", "volume", "shared_encoder", "leaky_slope",
                    "seed", "bottleneck_seed"});
    read(j, path, "base_channels", c.base_channels);
    read(j, path, "d_model", c.d_model);
    read(j, path, "heads", c.heads);
    read(j, path, "stack_depth", c.stack_depth);
    read(j, path, "inner_multiple", c.inner_multiple);
    read(j, path, "causal_mask", c.causal_mask);
    read(j, path, "use_pos_embed", c.use_pos_embed);
    if (j.contains("bottleneck_mode")) {
        std::string m;
        read(j, path, "bottleneck_mode", m);
        try {
            c.bottleneck_mode = parse_bottleneck_mode(m);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(path + ".bottleneck_mode: " + e.what());
        }
    }
    read(j, path, "cascade_steps", c.cascade_steps);
    read_geometry(j, path, "volume", c.volume);
    read(j, path, "shared_encoder", c.shared_encoder);
    read(j, path, "leaky_slope", c.leaky_slope);
    read_uint(j, path, "seed", c.seed);
    read_uint(j, path, "bottleneck_seed", c.bottleneck_seed);
    validated(path, [&] { validate(c); });
    return c;
}

TrainConfig train_config_from_json(const json& j, TrainConfig c, const std::string& path) {
    reject_unknown(j, path, {"lr", "steps", "seed", "phase", "log_every", "deterministic"});
    read(j, path, "lr", c.lr);
    read(j, path, "steps", c.steps);
    read_uint(j, path, "seed", c.seed);
    if (j.contains("phase")) {
        std::string p;
        read(j, path, "phase", p);
        try {
            c.phase = Phase::parse(p);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(path + ".phase: " + e.what());
        }
    }
    read(j, path, "log_every", c.log_every);
    read(j, path, "deterministic", c.deterministic);
    validated(path, [&] { validate(c); });
    return c;
}

LossConfig loss_config_from_json(const json& j, LossConfig c, const std::string& path) {
    reject_unknown(j, path, {"lambda", "deep_supervision", "deep_supervision_weight"});
    read(j, path, "lambda", c.lambda);
    read(j, path, "deep_supervision", c.deep_supervision);
    read(j, path, "deep_supervision_weight", c.deep_supervision_weight);
    validated(path, [&] { validate(c); });
    return c;
}

SynthConfig synth_config_from_json(const json& j, SynthConfig c, const std::string& path) {
    reject_unknown(j, path, {"size", "count", "seed", "max_disp", "smooth_sigma", "n_shapes"});
    read_geometry(j, path, "size", c.size);
    read(j, path, "count", c.count);
    read_uint(j, path, "seed", c.seed);
    read(j, path, "max_disp", c.max_disp);
    read(j, path, "smooth_sigma", c.smooth_sigma);
    read(j, path, "n_shapes", c.n_shapes);
    validated(path, [&] { validate(c); });
    return c;
}

RunConfig run_config_from_json(const json& j) {
    reject_unknown(j, "config", {"model", "train", "loss", "synth"});
    RunConfig c;
    if (j.contains("model")) c.model = model_config_from_json(j["model"], c.model, "model");
    if (j.contains("train")) c.train = train_config_from_json(j["train"], c.train, "train");
    if (j.contains("loss")) c.loss = loss_config_from_json(j["loss"], c.loss, "loss");
    if (j.contains("synth")) c.synth = synth_config_from_json(j["synth"], c.synth, "synth");
    return c;
}

RunConfig parse_run_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: not valid JSON: ") + e.what());
    }
    return run_config_from_json(j);
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

}  // namespace llreg
