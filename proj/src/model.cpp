#include "llreg/model.hpp"

#include <bit>
#include <cmath>
#include <stdexcept>

#include "llreg/rng.hpp"
#include "llreg/warp.hpp"

namespace llreg {

namespace {

constexpr float kNormEps = 1e-5f;

std::string step_prefix(int step) { return "step" + std::to_string(step) + "."; }

}  // namespace

std::string to_string(BottleneckMode m) {
    switch (m) {
        case BottleneckMode::FrozenSeeded: return "frozen_seeded";
        case BottleneckMode::Trainable: return "trainable";
        case BottleneckMode::StandardAttention: return "standard_attention";
    }
    return "?";
}

BottleneckMode parse_bottleneck_mode(const std::string& s) {
    if (s == "frozen_seeded") return BottleneckMode::FrozenSeeded;
    if (s == "trainable") return BottleneckMode::Trainable;
    if (s == "standard_attention") return BottleneckMode::StandardAttention;
    throw std::invalid_argument("unknown bottleneck_mode '" + s + "'");
}

void validate(const ModelConfig& cfg) {
    if (cfg.base_channels <= 0) throw std::invalid_argument("base_channels must be positive");
    if (cfg.d_model <= 0) throw std::invalid_argument("d_model must be positive");
    if (cfg.heads <= 0) throw std::invalid_argument("heads must be positive");
    if (cfg.d_model % (2 * cfg.heads) != 0)
        throw std::invalid_argument("d_model must be divisible by 2*heads");
    if (cfg.stack_depth <= 0) throw std::invalid_argument("stack_depth must be positive");
    if (cfg.inner_multiple <= 0) throw std::invalid_argument("inner_multiple must be positive");
    if (cfg.cascade_steps < 1) throw std::invalid_argument("cascade_steps must be >= 1");
    validate_geometry(cfg.volume);
    if (!cfg.volume.divisible_by(8))
        throw std::invalid_argument("volume dims must be divisible by 8, got " + cfg.volume.str());
}

int64_t ffn_hidden_width(int64_t d_model) {
    const int64_t raw = (8 * d_model) / 3;
    return ((raw + 63) / 64) * 64;
}

int64_t adapter_out_width(int stage, int64_t base_channels) {
    if (stage < 1 || stage > 4) throw std::invalid_argument("stage must be in 1..4");
    return (int64_t{1} << (2 * (stage + 1))) * base_channels;
}

int64_t reconstructed_channels(int stage, int64_t base_channels) {
    if (stage < 1 || stage > 4) throw std::invalid_argument("stage must be in 1..4");
    return (int64_t{1} << (5 - stage)) * base_channels;
}

int64_t fused_channels(int stage, int64_t base_channels) {
    if (stage < 1 || stage > 4) throw std::invalid_argument("stage must be in 1..4");
    return (int64_t{1} << (4 - stage)) * base_channels;
}

Phase Phase::parse(const std::string& s) {
    if (s == "single") return single();
    if (s == "joint") return joint();
    const std::string prefix = "cascade_step_";
    if (s.rfind(prefix, 0) == 0 && s.size() > prefix.size()) {
        const std::string digits = s.substr(prefix.size());
        if (digits.find_first_not_of("0123456789") == std::string::npos && digits.size() < 6) {
            const int k = std::stoi(digits);
            if (k >= 1) return cascade(k);
        }
    }
    throw std::invalid_argument("unknown phase '" + s + "'");
}

std::string Phase::str() const {
    switch (kind) {
        case Kind::Single: return "single";
        case Kind::Joint: return "joint";
        case Kind::CascadeStep: return "cascade_step_" + std::to_string(step);
    }
    return "?";
}

int Phase::active_steps(int cascade_steps) const {
    switch (kind) {
        case Kind::Single: return 1;
        case Kind::Joint: return cascade_steps;
        case Kind::CascadeStep:
            if (step > cascade_steps)
                throw std::invalid_argument("phase " + str() + " exceeds cascade_steps " + std::to_string(cascade_steps));
            return step;
    }
    return 1;
}

// ---------------------------------------------------------------------------
// Construction

Tensor RegModel::add_param(const std::string& name, ad::Shape shape, std::vector<float> data, ParamGroup g,
                           int step) {
    auto v = Tensor::parameter(std::move(shape), std::move(data));
    params_.push_back({name, v, g, step});
    return v;
}

RegModel::Conv RegModel::make_conv(const std::string& name, int64_t ci, int64_t co, int stride, ParamGroup g,
                                   int step, bool zero) {
    Conv c;
    c.stride = stride;
    const int64_t fan_in = 27 * ci;
    std::vector<float> w(static_cast<size_t>(27 * ci * co), 0.0f), b(static_cast<size_t>(co), 0.0f);
    if (!zero) {
        Rng rng(derive_seed(cfg_.seed, name));
        const double gain = 2.0 / (1.0 + double(cfg_.leaky_slope) * cfg_.leaky_slope);
        const double bound = std::sqrt(3.0 * gain / double(fan_in));
        for (auto& x : w) x = static_cast<float>(rng.uniform(-bound, bound));
        const double bb = 1.0 / std::sqrt(double(fan_in));
        for (auto& x : b) x = static_cast<float>(rng.uniform(-bb, bb));
    }
    c.w = add_param(name + ".w", {3, 3, 3, ci, co}, std::move(w), g, step);
    c.b = add_param(name + ".b", {co}, std::move(b), g, step);
    return c;
}

RegModel::Deconv RegModel::make_deconv(const std::string& name, int64_t ci, int64_t co, ParamGroup g, int step) {
    Rng rng(derive_seed(cfg_.seed, name));
    const double gain = 2.0 / (1.0 + double(cfg_.leaky_slope) * cfg_.leaky_slope);
    const double bound = std::sqrt(3.0 * gain / double(ci));
    std::vector<float> w(static_cast<size_t>(ci * 8 * co)), b(static_cast<size_t>(co));
    for (auto& x : w) x = static_cast<float>(rng.uniform(-bound, bound));
    const double bb = 1.0 / std::sqrt(double(ci));
    for (auto& x : b) x = static_cast<float>(rng.uniform(-bb, bb));
    Deconv d;
    d.w = add_param(name + ".w", {ci, 2, 2, 2, co}, std::move(w), g, step);
    d.b = add_param(name + ".b", {co}, std::move(b), g, step);
    return d;
}

RegModel::Linear RegModel::make_linear(const std::string& name, int64_t in, int64_t out, ParamGroup g, int step,
                                       bool bias, uint64_t seed, bool normal) {
    Rng rng(derive_seed(seed == 0 ? cfg_.seed : seed, name));
    const double bound = 1.0 / std::sqrt(double(in));
    std::vector<float> w(static_cast<size_t>(in * out));
    for (auto& x : w) x = static_cast<float>(normal ? rng.normal() * bound : rng.uniform(-bound, bound));
    Linear l;
    l.w = add_param(name + ".w", {out, in}, std::move(w), g, step);
    if (bias) {
        std::vector<float> b(static_cast<size_t>(out));
        for (auto& x : b) x = static_cast<float>(rng.uniform(-bound, bound));
        l.b = add_param(name + ".b", {out}, std::move(b), g, step);
    }
    return l;
}

RegModel::Stack RegModel::make_stack(const std::string& name) {
    const int64_t d = cfg_.d_model;
    const bool standard = cfg_.bottleneck_mode == BottleneckMode::StandardAttention;
    const uint64_t seed = standard ? cfg_.seed : cfg_.bottleneck_seed;
    const auto g = ParamGroup::Bottleneck;
    auto ones = [&](const std::string& n) { return add_param(n, {d}, std::vector<float>(size_t(d), 1.0f), g, 0); };
    auto zeros = [&](const std::string& n) { return add_param(n, {d}, std::vector<float>(size_t(d), 0.0f), g, 0); };
    Stack s;
    for (int64_t i = 0; i < cfg_.stack_depth; ++i) {
        const std::string p = name + ".layer" + std::to_string(i) + ".";
        Layer l;
        l.norm1 = ones(p + "attn_norm");
        if (standard) l.norm1_b = zeros(p + "attn_norm_b");
        auto q = make_linear(p + "wq", d, d, g, 0, standard, seed, !standard);
        auto k = make_linear(p + "wk", d, d, g, 0, standard, seed, !standard);
        auto v = make_linear(p + "wv", d, d, g, 0, standard, seed, !standard);
        auto o = make_linear(p + "wo", d, d, g, 0, standard, seed, !standard);
        l.wq = q.w, l.bq = q.b, l.wk = k.w, l.bk = k.b, l.wv = v.w, l.bv = v.b, l.wo = o.w, l.bo = o.b;
        l.norm2 = ones(p + "ffn_norm");
        if (standard) {
            l.norm2_b = zeros(p + "ffn_norm_b");
            auto w1 = make_linear(p + "w1", d, 4 * d, g, 0, true, seed);
            auto w2 = make_linear(p + "w2", 4 * d, d, g, 0, true, seed);
            l.w1 = w1.w, l.b1 = w1.b, l.w2 = w2.w, l.b2 = w2.b;
        } else {
            const int64_t h = ffn_hidden_width(d);
            l.w1 = make_linear(p + "w1", d, h, g, 0, false, seed, true).w;
            l.w3 = make_linear(p + "w3", d, h, g, 0, false, seed, true).w;
            l.w2 = make_linear(p + "w2", h, d, g, 0, false, seed, true).w;
        }
        s.layers.push_back(std::move(l));
    }
    s.final_norm = ones(name + ".norm");
    if (standard) s.final_norm_b = zeros(name + ".norm_b");
    return s;
}

RegModel::RegModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    validate(cfg_);
    const int64_t C = cfg_.base_channels;

    auto build_stream = [&](const std::string& name) {
        Stream s;
        const auto g = ParamGroup::Encoder;
        s.levels[0].push_back(make_conv(name + ".l1.conv0", 1, C, 1, g, 0));
        for (int lvl = 1; lvl < 4; ++lvl) {
            const int64_t ci = C << (lvl - 1), co = C << lvl;
            const std::string p = name + ".l" + std::to_string(lvl + 1);
            s.levels[lvl].push_back(make_conv(p + ".conv0", ci, co, 2, g, 0));
            s.levels[lvl].push_back(make_conv(p + ".conv1", co, co, 1, g, 0));
        }
        return s;
    };
    enc_moving_ = build_stream("encoder.moving");
    enc_fixed_ = cfg_.shared_encoder ? enc_moving_ : build_stream("encoder.fixed");

    const int64_t d = cfg_.d_model;
    adapter0_a_ = make_linear("adapter0.a", 16 * C, d / 2, ParamGroup::Bridge, 0);
    adapter0_b_ = make_linear("adapter0.b", d / 2, d, ParamGroup::Bridge, 0);
    if (cfg_.use_pos_embed) {
        Rng rng(derive_seed(cfg_.seed, "pos_embed"));
        std::vector<float> pe(static_cast<size_t>(cfg_.token_count() * d));
        for (auto& x : pe) x = static_cast<float>(0.02 * rng.normal());
        pos_embed_ = add_param("pos_embed", {cfg_.token_count(), d}, std::move(pe), ParamGroup::Bridge, 0);
    }
    stack1_ = make_stack("stack1");
    inner_a_ = make_linear("inner_adapter.a", d, cfg_.inner_multiple * d, ParamGroup::Bridge, 0);
    inner_b_ = make_linear("inner_adapter.b", cfg_.inner_multiple * d, d, ParamGroup::Bridge, 0);
    stack2_ = make_stack("stack2");

    for (int k = 1; k <= cfg_.cascade_steps; ++k) {
        const std::string p = step_prefix(k);
        const int64_t prev = k > 1 ? 1 : 0;
        Step st;
        for (int i = 1; i <= 4; ++i) {
            st.adapters[i - 1] =
                make_linear(p + "adapter" + std::to_string(i), d, adapter_out_width(i, C), ParamGroup::StepAdapter, k);
            if (st.adapters[i - 1].w.dim(0) != adapter_out_width(i, C))
                throw std::logic_error("adapter output width contract violated");
        }
        const auto g = ParamGroup::StepDecoder;
        // Input channels per stage: encoder pair, upsampled features, token features,
        // previous-step fusion features, and (S_3, S_4) field + warped image.
        for (int i = 1; i <= 4; ++i) {
            const int lvl = 4 - i;
            int64_t ci = 2 * (C << lvl) + reconstructed_channels(i, C) + prev * fused_channels(i, C);
            if (i > 1) ci += fused_channels(i, C);
            if (i > 2) ci += 4;
            const std::string s = p + "S" + std::to_string(i);
            st.fuse[i - 1] = make_conv(s + ".fuse", ci, fused_channels(i, C), 1, g, k);
            if (i > 1) st.head[i - 1] = make_conv(s + ".head", fused_channels(i, C), 3, 1, g, k, true);
            if (i < 4) {
                st.up[i - 1] = make_deconv(s + ".up", fused_channels(i, C), fused_channels(i + 1, C), g, k);
            }
        }
        steps_.push_back(std::move(st));
    }
    apply_phase(Phase::single());
}

// ---------------------------------------------------------------------------
// Forward

Tensor RegModel::conv_block(const Conv& c, const Tensor& x) const {
    return ad::leaky_relu(ad::conv3d(x, c.w, c.b, c.stride), cfg_.leaky_slope);
}

Tensor RegModel::apply_linear(const Linear& l, const Tensor& x) const { return ad::linear(x, l.w, l.b); }

std::array<Tensor, 4> RegModel::encode_stream(const Stream& s, const Tensor& image) const {
    std::array<Tensor, 4> out;
    Tensor x = image;
    for (int lvl = 0; lvl < 4; ++lvl) {
        for (const auto& c : s.levels[lvl]) x = conv_block(c, x);
        out[lvl] = x;
    }
    return out;
}

EncoderPyramid RegModel::encode_pair(const Tensor& moving, const Tensor& fixed) const {
    if (moving.rank() != 4 || moving.dim(3) != 1 || moving.shape() != fixed.shape())
        throw std::invalid_argument("encode_pair: expected matching [nz,ny,nx,1] inputs, got " +
                                    ad::shape_str(moving.shape()) + " and " + ad::shape_str(fixed.shape()));
    const auto g = geometry_of(moving.shape());
    validate_geometry(g);
    if (!g.divisible_by(8)) throw std::invalid_argument("encode_pair: dims must be divisible by 8, got " + g.str());
    return {encode_stream(enc_moving_, moving), encode_stream(enc_fixed_, fixed)};
}

Tensor RegModel::attention(const Layer& l, const Tensor& h) const {
    const bool standard = cfg_.bottleneck_mode == BottleneckMode::StandardAttention;
    const int64_t hd = cfg_.d_model / cfg_.heads;
    auto q = ad::linear(h, l.wq, l.bq);
    auto k = ad::linear(h, l.wk, l.bk);
    auto v = ad::linear(h, l.wv, l.bv);
    if (!standard) {
        q = ad::rotary_embed(q, hd);
        k = ad::rotary_embed(k, hd);
    }
    const float inv = 1.0f / std::sqrt(static_cast<float>(hd));
    std::vector<Tensor> heads;
    for (int64_t i = 0; i < cfg_.heads; ++i) {
        auto qh = ad::slice(q, 1, i * hd, hd);
        auto kh = ad::slice(k, 1, i * hd, hd);
        auto vh = ad::slice(v, 1, i * hd, hd);
        auto scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv);
        if (!standard && cfg_.causal_mask) scores = ad::causal_mask(scores);
        heads.push_back(ad::matmul(ad::softmax(scores, 1), vh));
    }
    return ad::linear(ad::concat(heads, 1), l.wo, l.bo);
}

Tensor RegModel::stack_forward(const Stack& s, const Tensor& input) const {
    const bool standard = cfg_.bottleneck_mode == BottleneckMode::StandardAttention;
    auto norm = [&](const Tensor& x, const Tensor& w, const Tensor& b) {
        return standard ? ad::layer_norm(x, w, b, kNormEps) : ad::rms_norm(x, w, kNormEps);
    };
    Tensor x = input;
    for (const auto& l : s.layers) {
        x = ad::add(x, attention(l, norm(x, l.norm1, l.norm1_b)));
        auto h = norm(x, l.norm2, l.norm2_b);
        Tensor f;
        if (standard) {
            f = ad::linear(ad::gelu(ad::linear(h, l.w1, l.b1)), l.w2, l.b2);
        } else {
            auto gate = ad::silu(ad::linear(h, l.w1, Tensor{}));
            auto up = ad::linear(h, l.w3, Tensor{});
            f = ad::linear(ad::mul(gate, up), l.w2, Tensor{});
        }
        x = ad::add(x, f);
    }
    return norm(x, s.final_norm, s.final_norm_b);
}

Tensor RegModel::llama_block_forward(const EncoderPyramid& p) const {
    const int64_t C = cfg_.base_channels;
    auto deep = ad::concat(std::vector<Tensor>{p.moving[3], p.fixed[3]}, 3);
    const int64_t n = deep.dim(0) * deep.dim(1) * deep.dim(2);
    auto x = ad::reshape(deep, {n, 16 * C});
    x = apply_linear(adapter0_b_, apply_linear(adapter0_a_, x));
    if (cfg_.use_pos_embed) {
        if (pos_embed_.dim(0) != n)
            throw ad::ShapeError("token count " + std::to_string(n) + " does not match position embedding rows " +
                                 std::to_string(pos_embed_.dim(0)));
        x = ad::add(x, pos_embed_);
    }
    x = stack_forward(stack1_, x);
    x = apply_linear(inner_b_, ad::silu(apply_linear(inner_a_, x)));
    return stack_forward(stack2_, x);
}

Tensor RegModel::reconstruct_stage_features(const Tensor& tokens, int stage, int step) const {
    if (stage < 1 || stage > 4) throw std::invalid_argument("reconstruct_stage_features: stage must be in 1..4");
    if (step < 1 || step > cfg_.cascade_steps) throw std::invalid_argument("reconstruct_stage_features: bad step");
    const auto& g = cfg_.volume;
    const int64_t n = (g.nx / 8) * (g.ny / 8) * (g.nz / 8);
    if (tokens.rank() != 2 || tokens.dim(0) != n)
        throw ad::ShapeError("reconstruct_stage_features: expected " + std::to_string(n) + " tokens, got " +
                             ad::shape_str(tokens.shape()));
    auto proj = apply_linear(steps_[step - 1].adapters[stage - 1], tokens);
    const int64_t ch = proj.dim(1);
    const int64_t r = int64_t{1} << (stage - 1);
    if (ch % (r * r * r) != 0)
        throw ad::ShapeError("reconstruct_stage_features: channels " + std::to_string(ch) + " not divisible by " +
                             std::to_string(r * r * r));
    auto grid = ad::reshape(proj, {g.nz / 8, g.ny / 8, g.nx / 8, ch});
    return r == 1 ? grid : ad::voxel_shuffle(grid, r);
}

ForwardResult RegModel::forward(const Tensor& moving, const Tensor& fixed, int steps, bool trace_shapes) const {
    if (steps < 1 || steps > cfg_.cascade_steps)
        throw std::invalid_argument("forward: requested " + std::to_string(steps) + " steps, model has " +
                                    std::to_string(cfg_.cascade_steps));
    const auto geo = geometry_of(moving.shape());
    if (!(geo == cfg_.volume))
        throw std::invalid_argument("forward: input geometry " + geo.str() + " differs from model geometry " +
                                    cfg_.volume.str());
    ForwardResult res;
    auto trace = [&](const std::string& name, const Tensor& t) {
        if (trace_shapes) res.shape_trace.emplace_back(name, t.shape());
    };

    const auto pyr = encode_pair(moving, fixed);
    for (int lvl = 0; lvl < 4; ++lvl) trace("encoder.moving.F" + std::to_string(lvl + 1), pyr.moving[lvl]);
    for (int lvl = 0; lvl < 4; ++lvl) trace("encoder.fixed.F" + std::to_string(lvl + 1), pyr.fixed[lvl]);
    const auto y = llama_block_forward(pyr);
    trace("bottleneck.y", y);

    // Moving image at 1/2 and full resolution for S_3 / S_4 warps.
    std::array<Tensor, 2> moving_at{
        ad::resample_trilinear(moving, geo.nz / 2, geo.ny / 2, geo.nx / 2), moving};

    for (int k = 1; k <= steps; ++k) {
        const auto& st = steps_[k - 1];
        const std::string p = step_prefix(k);
        const StepOutput* prev = k > 1 ? &res.steps.back() : nullptr;
        Tensor base = prev ? prev->total : Tensor{};
        Tensor base_half, base_quarter;
        if (base.defined()) {
            base_half = downscale_field(base);
            base_quarter = downscale_field(base_half);
        }

        StepOutput out;
        Tensor up, chi;
        for (int i = 1; i <= 4; ++i) {
            const int lvl = 4 - i;
            const std::string s = p + "S" + std::to_string(i);
            auto ft = reconstruct_stage_features(y, i, k);
            trace(s + ".Ft", ft);
            std::vector<Tensor> parts;
            if (i > 2) {
                chi = upscale_field(chi);
                const Tensor& b = i == 3 ? base_half : base;
                auto total = b.defined() ? compose(b, chi) : chi;
                parts.push_back(total);
                parts.push_back(warp(moving_at[i - 3], total));
            }
            parts.push_back(pyr.moving[lvl]);
            parts.push_back(pyr.fixed[lvl]);
            if (i > 1) parts.push_back(up);
            parts.push_back(ft);
            if (prev) parts.push_back(prev->fused[i - 1]);
            auto fused = conv_block(st.fuse[i - 1], ad::concat(parts, 3));
            trace(s + ".F", fused);
            out.fused[i - 1] = fused;
            if (i > 1) {
                auto psi = ad::conv3d(fused, st.head[i - 1].w, st.head[i - 1].b, 1);
                trace(s + ".field", psi);
                chi = i == 2 ? psi : compose(chi, psi);
                if (i < 4) {
                    const Tensor& b = i == 2 ? base_quarter : base_half;
                    out.stage_totals[i - 2] = b.defined() ? compose(b, chi) : chi;
                }
            }
            if (i < 4) {
                up = ad::leaky_relu(ad::conv_transpose3d(fused, st.up[i - 1].w, st.up[i - 1].b), cfg_.leaky_slope);
                trace(s + ".up", up);
            }
        }
        out.step_field = chi;
        out.total = base.defined() ? compose(base, chi) : chi;
        trace(p + "total", out.total);
        res.steps.push_back(std::move(out));
    }
    res.field = res.steps.back().total;
    return res;
}

std::vector<std::pair<std::string, ad::Shape>> planned_shapes(const ModelConfig& cfg, int steps) {
    validate(cfg);
    const int64_t C = cfg.base_channels;
    const auto& g = cfg.volume;
    auto at = [&](int lvl, int64_t ch) -> ad::Shape { return {g.nz >> lvl, g.ny >> lvl, g.nx >> lvl, ch}; };
    std::vector<std::pair<std::string, ad::Shape>> out;
    for (const char* s : {"moving", "fixed"})
        for (int lvl = 0; lvl < 4; ++lvl)
            out.emplace_back(std::string("encoder.") + s + ".F" + std::to_string(lvl + 1), at(lvl, C << lvl));
    out.emplace_back("bottleneck.y", ad::Shape{cfg.token_count(), cfg.d_model});
    for (int k = 1; k <= steps; ++k) {
        for (int i = 1; i <= 4; ++i) {
            const int lvl = 4 - i;
            const std::string s = step_prefix(k) + "S" + std::to_string(i);
            out.emplace_back(s + ".Ft", at(lvl, reconstructed_channels(i, C)));
            out.emplace_back(s + ".F", at(lvl, fused_channels(i, C)));
            if (i > 1) out.emplace_back(s + ".field", at(lvl, 3));
            if (i < 4) out.emplace_back(s + ".up", at(lvl - 1, fused_channels(i + 1, C)));
        }
        out.emplace_back(step_prefix(k) + "total", at(0, 3));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parameter groups

const ParamEntry* RegModel::find(const std::string& name) const {
    for (const auto& p : params_)
        if (p.name == name) return &p;
    return nullptr;
}

ParameterPartition RegModel::parameter_groups(const Phase& phase) const {
    const int active = phase.active_steps(cfg_.cascade_steps);
    const bool first = phase.kind == Phase::Kind::Single ||
                       (phase.kind == Phase::Kind::CascadeStep && phase.step == 1);
    ParameterPartition part;
    for (const auto& p : params_) {
        bool train = false;
        switch (p.group) {
            case ParamGroup::Encoder:
            case ParamGroup::Bridge: train = first; break;
            case ParamGroup::Bottleneck: train = first && cfg_.bottleneck_mode != BottleneckMode::FrozenSeeded; break;
            case ParamGroup::StepAdapter:
            case ParamGroup::StepDecoder:
                train = phase.kind == Phase::Kind::Joint ? p.step <= active : p.step == active;
                break;
        }
        (train ? part.trainable : part.frozen).push_back(p.name);
    }
    return part;
}

void RegModel::apply_phase(const Phase& phase) {
    const auto part = parameter_groups(phase);
    for (auto& p : params_) p.var.set_requires_grad(false);
    for (const auto& n : part.trainable)
        for (auto& p : params_)
            if (p.name == n) p.var.set_requires_grad(true);
}

void RegModel::freeze_all() {
    for (auto& p : params_) p.var.set_requires_grad(false);
}

uint64_t RegModel::hash_parameters(const std::vector<std::string>& names) const {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](unsigned char c) {
        h ^= c;
        h *= 0x100000001b3ULL;
    };
    for (const auto& n : names) {
        const auto* p = find(n);
        if (!p) throw std::invalid_argument("unknown parameter '" + n + "'");
        for (char c : n) mix(static_cast<unsigned char>(c));
        for (float v : p->var.data()) {
            const auto bits = std::bit_cast<uint32_t>(v);
            for (int b = 0; b < 4; ++b) mix(static_cast<unsigned char>(bits >> (8 * b)));
        }
    }
    return h;
}

std::vector<std::string> RegModel::names_in(ParamGroup group, int step) const {
    std::vector<std::string> out;
    for (const auto& p : params_)
        if (p.group == group && (step == 0 || p.step == step)) out.push_back(p.name);
    return out;
}

uint64_t RegModel::hash_group(ParamGroup group, int step) const { return hash_parameters(names_in(group, step)); }

void RegModel::zero_field_heads() {
    for (auto& p : params_)
        if (p.name.find(".head.") != std::string::npos)
            for (auto& v : p.var.mutable_data()) v = 0.0f;
}

void RegModel::zero_all_convolutions() {
    for (auto& p : params_) {
        if (p.group != ParamGroup::Encoder && p.group != ParamGroup::StepDecoder) continue;
        for (auto& v : p.var.mutable_data()) v = 0.0f;
    }
}

DisplacementField predict_field(const RegModel& model, const ScalarVolume& moving, const ScalarVolume& fixed,
                                int steps) {
    ad::NoGradGuard guard;
    auto r = model.forward(to_var(moving), to_var(fixed), steps);
    return to_field(r.field);
}

}  // namespace llreg
