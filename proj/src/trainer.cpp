#include "llreg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "llreg/config.hpp"
#include "llreg/rng.hpp"
#include "llreg/runtime.hpp"
#include "llreg/warp.hpp"

namespace llreg {

void validate(const TrainConfig& cfg) {
    if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) throw std::invalid_argument("lr must be > 0");
    if (cfg.steps < 1) throw std::invalid_argument("steps must be >= 1");
    if (cfg.log_every < 1) throw std::invalid_argument("log_every must be >= 1");
}

void adam_step(RegModel& model, AdamState& st, double lr) {
    ++st.t;
    const double bc1 = 1.0 - std::pow(AdamState::kBeta1, double(st.t));
    const double bc2 = 1.0 - std::pow(AdamState::kBeta2, double(st.t));
    for (auto& p : model.parameters()) {
        if (!p.var.requires_grad() || !p.var.has_grad()) continue;
        auto w = p.var.mutable_data();
        auto g = p.var.grad();
        auto& m = st.m[p.name];
        auto& v = st.v[p.name];
        if (m.size() != w.size()) m.assign(w.size(), 0.0f);
        if (v.size() != w.size()) v.assign(w.size(), 0.0f);
        const float b1 = float(AdamState::kBeta1), b2 = float(AdamState::kBeta2);
        const float step = float(lr / bc1), inv_bc2 = float(1.0 / bc2), eps = float(AdamState::kEps);
        const int64_t n = static_cast<int64_t>(w.size());
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) {
            m[i] = b1 * m[i] + (1.0f - b1) * g[i];
            v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
            w[i] -= step * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
        }
    }
}

LossTerms<float> registration_loss(const RegModel& model, const Tensor& moving, const Tensor& fixed, int steps,
                                   const LossConfig& loss) {
    auto res = model.forward(moving, fixed, steps);
    auto terms = total_loss(moving, fixed, res.field, loss.lambda);
    if (loss.deep_supervision) {
        const auto& last = res.steps.back();
        for (const auto& phi : last.stage_totals) {
            const int64_t d = phi.dim(0), h = phi.dim(1), w = phi.dim(2);
            auto m = ad::resample_trilinear(moving, d, h, w);
            auto f = ad::resample_trilinear(fixed, d, h, w);
            auto term = mse(warp(m, phi), f);
            terms.total = ad::add(terms.total, ad::scale(term, float(loss.deep_supervision_weight)));
        }
    }
    return terms;
}

double dataset_loss(const RegModel& model, const std::vector<TrainPair>& data, int steps, const LossConfig& loss) {
    if (data.empty()) throw std::invalid_argument("dataset is empty");
    ad::NoGradGuard guard;
    double acc = 0.0;
    for (const auto& p : data) acc += registration_loss(model, to_var(p.moving), to_var(p.fixed), steps, loss).total.item();
    return acc / double(data.size());
}

namespace {

std::vector<size_t> epoch_order(size_t n, uint64_t seed, int64_t epoch) {
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    Rng rng(derive_seed(seed, "epoch" + std::to_string(epoch)));
    for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(0, int64_t(i) - 1))]);
    return order;
}

}  // namespace

TrainResult train(RegModel& model, const std::vector<TrainPair>& data, const TrainConfig& cfg, const LossConfig& loss,
                  const TrainOptions& opts) {
    validate(cfg);
    validate(loss);
    if (data.empty()) throw std::invalid_argument("dataset is empty");
    const int active = cfg.phase.active_steps(model.config().cascade_steps);
    if (cfg.phase.kind == Phase::Kind::CascadeStep && model.trained_steps() < cfg.phase.step - 1)
        throw std::invalid_argument("phase " + cfg.phase.str() + " requires " + std::to_string(cfg.phase.step - 1) +
                                    " trained steps, model has " + std::to_string(model.trained_steps()));
    const bool was_det = deterministic();
    if (cfg.deterministic) set_deterministic(true);

    std::vector<Tensor> movings, fixeds;
    for (const auto& p : data) {
        if (!(p.moving.geometry == model.config().volume) || !(p.fixed.geometry == model.config().volume))
            throw std::invalid_argument("training pair geometry " + p.moving.geometry.str() +
                                        " differs from model geometry " + model.config().volume.str());
        movings.push_back(to_var(p.moving));
        fixeds.push_back(to_var(p.fixed));
    }

    TrainResult out;
    out.state.phase = cfg.phase;
    if (opts.resume) {
        if (!(opts.resume->phase == cfg.phase))
            throw std::invalid_argument("resume state is for phase " + opts.resume->phase.str() + ", not " +
                                        cfg.phase.str());
        out.state = *opts.resume;
    }
    model.apply_phase(cfg.phase);

    const auto n = data.size();
    std::vector<size_t> order;
    int64_t order_epoch = -1;
    for (int step = out.state.step; step < cfg.steps; ++step) {
        const int64_t epoch = step / int64_t(n);
        if (epoch != order_epoch) {
            order = epoch_order(n, cfg.seed, epoch);
            order_epoch = epoch;
        }
        const size_t idx = order[static_cast<size_t>(step % int64_t(n))];
        auto terms = registration_loss(model, movings[idx], fixeds[idx], active, loss);
        TraceRow row{step, double(terms.total.item()), double(terms.similarity.item()), double(terms.regularity.item())};
        if (!std::isfinite(row.loss)) {
            set_deterministic(was_det);
            throw TrainError(step, "non-finite loss at step " + std::to_string(step) + " (phase " + cfg.phase.str() +
                                       ")");
        }
        terms.total.backward();
        adam_step(model, out.state.adam, cfg.lr);
        for (auto& p : model.parameters()) p.var.zero_grad();
        out.state.step = step + 1;
        out.trace.push_back(row);
        if (opts.on_row) opts.on_row(row);
        if (opts.on_checkpoint && opts.checkpoint_every > 0 && out.state.step % opts.checkpoint_every == 0 &&
            out.state.step < cfg.steps)
            opts.on_checkpoint(out.state);
    }
    if (cfg.phase.kind == Phase::Kind::Joint)
        model.set_trained_steps(model.config().cascade_steps);
    else
        model.set_trained_steps(std::max(model.trained_steps(), active));
    set_deterministic(was_det);
    return out;
}

std::vector<TrainResult> train_cascade(RegModel& model, const std::vector<TrainPair>& data,
                                       std::vector<TrainConfig> cfgs, CascadeMode mode, const LossConfig& loss,
                                       const std::function<void(const TrainResult&, const RegModel&)>& on_phase) {
    const int n = model.config().cascade_steps;
    std::vector<TrainResult> out;
    if (mode == CascadeMode::StepByStep) {
        if (static_cast<int>(cfgs.size()) != n)
            throw std::invalid_argument("step_by_step needs " + std::to_string(n) + " train configs, got " +
                                        std::to_string(cfgs.size()));
        for (int k = 1; k <= n; ++k) {
            auto cfg = cfgs[k - 1];
            cfg.phase = Phase::cascade(k);
            out.push_back(train(model, data, cfg, loss));
            if (on_phase) on_phase(out.back(), model);
        }
    } else {
        if (cfgs.size() != 2) throw std::invalid_argument("joint mode needs 2 train configs");
        cfgs[0].phase = Phase::single();
        cfgs[1].phase = Phase::joint();
        for (const auto& cfg : cfgs) {
            out.push_back(train(model, data, cfg, loss));
            if (on_phase) on_phase(out.back(), model);
        }
    }
    return out;
}

void write_trace(const std::vector<TraceRow>& rows, const std::filesystem::path& path, bool append) {
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write trace " + path.string());
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%d\t%.9g\t%.9g\t%.9g\n", r.step, r.loss, r.sim, r.reg);
        out << buf;
    }
}

std::vector<TraceRow> read_trace(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read trace " + path.string());
    std::vector<TraceRow> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        TraceRow r;
        if (!(ls >> r.step >> r.loss >> r.sim >> r.reg)) throw std::runtime_error("malformed trace line: " + line);
        rows.push_back(r);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[5] = {'C', 'K', 'P', 'T', '1'};

void put_u64(std::string& s, uint64_t v) {
    for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64(const std::string& s, size_t at) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(static_cast<unsigned char>(s[at + i])) << (8 * i);
    return v;
}

void put_floats(std::string& s, std::span<const float> xs) {
    for (float f : xs) {
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
}

void get_floats(const std::string& s, size_t at, std::span<float> out) {
    for (size_t k = 0; k < out.size(); ++k) {
        uint32_t bits = 0;
        for (int i = 0; i < 4; ++i) bits |= uint32_t(static_cast<unsigned char>(s[at + 4 * k + i])) << (8 * i);
        std::memcpy(&out[k], &bits, 4);
    }
}

bool same_architecture(const ModelConfig& a, const ModelConfig& b, std::string& field) {
    auto check = [&](bool same, const char* name) {
        if (!same && field.empty()) field = name;
    };
    check(a.base_channels == b.base_channels, "base_channels");
    check(a.d_model == b.d_model, "d_model");
    check(a.heads == b.heads, "heads");
    check(a.stack_depth == b.stack_depth, "stack_depth");
    check(a.inner_multiple == b.inner_multiple, "inner_multiple");
    check(a.causal_mask == b.causal_mask, "causal_mask");
    check(a.use_pos_embed == b.use_pos_embed, "use_pos_embed");
    check(a.bottleneck_mode == b.bottleneck_mode, "bottleneck_mode");
    check(a.cascade_steps == b.cascade_steps, "cascade_steps");
    check(a.volume == b.volume, "volume");
    check(a.shared_encoder == b.shared_encoder, "shared_encoder");
    return field.empty();
}

}  // namespace

void save_checkpoint(const RegModel& model, const std::filesystem::path& path, const TrainState* state) {
    nlohmann::ordered_json manifest;
    manifest["config"] = to_json(model.config());
    manifest["trained_cascade_steps"] = model.trained_steps();
    std::string blob;
    auto entries = nlohmann::ordered_json::array();
    auto add = [&](const std::string& name, const ad::Shape& shape, std::span<const float> data) {
        entries.push_back({{"name", name}, {"shape", shape}, {"dtype", "f32"}, {"offset", blob.size()}});
        put_floats(blob, data);
    };
    for (const auto& p : model.parameters()) add(p.name, p.var.shape(), p.var.data());
    if (state) {
        manifest["train_state"] = {{"phase", state->phase.str()}, {"step", state->step}, {"adam_t", state->adam.t}};
        for (const auto& p : model.parameters()) {
            auto m = state->adam.m.find(p.name);
            auto v = state->adam.v.find(p.name);
            if (m == state->adam.m.end() || v == state->adam.v.end()) continue;
            add("adam_m/" + p.name, p.var.shape(), m->second);
            add("adam_v/" + p.name, p.var.shape(), v->second);
        }
    }
    manifest["params"] = entries;
    manifest["blob_bytes"] = blob.size();
    const std::string text = manifest.dump();

    std::string out(kMagic, sizeof kMagic);
    put_u64(out, text.size());
    out += text;
    out += blob;
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    auto corrupt = [&](const std::string& why) { return CheckpointError("checkpoint corrupt: " + why); };
    if (bytes.size() < sizeof kMagic + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
        throw corrupt("bad magic");
    const uint64_t mlen = get_u64(bytes, sizeof kMagic);
    const size_t mstart = sizeof kMagic + 8;
    if (mlen > bytes.size() - mstart) throw corrupt("manifest truncated");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(mstart, mlen));
    } catch (const std::exception& e) {
        throw corrupt(std::string("manifest unreadable: ") + e.what());
    }
    const size_t bstart = mstart + mlen;

    ModelConfig cfg;
    int trained = 0;
    uint64_t blob_bytes = 0;
    try {
        cfg = model_config_from_json(manifest.at("config"));
        trained = manifest.at("trained_cascade_steps").get<int>();
        blob_bytes = manifest.at("blob_bytes").get<uint64_t>();
    } catch (const ConfigError& e) {
        throw corrupt(e.what());
    } catch (const nlohmann::json::exception& e) {
        throw corrupt(e.what());
    }
    if (bytes.size() - bstart != blob_bytes)
        throw corrupt("expected " + std::to_string(blob_bytes) + " blob bytes, found " +
                      std::to_string(bytes.size() - bstart));
    if (expected) {
        std::string field;
        if (!same_architecture(cfg, *expected, field))
            throw CheckpointError("config mismatch: checkpoint " + field + " differs from requested config");
    }

    LoadedCheckpoint out{RegModel(cfg), std::nullopt};
    out.model.set_trained_steps(trained);
    std::optional<TrainState> state;
    if (manifest.contains("train_state")) {
        const auto& ts = manifest["train_state"];
        state.emplace();
        state->phase = Phase::parse(ts.at("phase").get<std::string>());
        state->step = ts.at("step").get<int>();
        state->adam.t = ts.at("adam_t").get<int64_t>();
    }
    size_t seen = 0;
    for (const auto& e : manifest.at("params")) {
        const auto name = e.at("name").get<std::string>();
        const auto shape = e.at("shape").get<ad::Shape>();
        const auto offset = e.at("offset").get<uint64_t>();
        if (e.at("dtype").get<std::string>() != "f32") throw corrupt("unsupported dtype for " + name);
        const auto count = static_cast<uint64_t>(ad::numel(shape));
        if (offset > blob_bytes || count * 4 > blob_bytes - offset) throw corrupt("blob out of range for " + name);
        const size_t at = bstart + offset;
        if (name.rfind("adam_m/", 0) == 0 || name.rfind("adam_v/", 0) == 0) {
            if (!state) throw corrupt("optimizer moments without train state");
            auto& dst = (name[5] == 'm' ? state->adam.m : state->adam.v)[name.substr(7)];
            dst.resize(count);
            get_floats(bytes, at, dst);
            continue;
        }
        auto it = std::find_if(out.model.parameters().begin(), out.model.parameters().end(),
                               [&](const ParamEntry& p) { return p.name == name; });
        if (it == out.model.parameters().end()) throw corrupt("unknown parameter " + name);
        if (it->var.shape() != shape) throw corrupt("shape mismatch for " + name);
        get_floats(bytes, at, it->var.mutable_data());
        ++seen;
    }
    if (seen != out.model.parameters().size()) throw corrupt("missing parameters");
    out.state = std::move(state);
    return out;
}

}  // namespace llreg
