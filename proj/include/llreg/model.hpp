#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "llreg/diffops.hpp"
#include "llreg/volume.hpp"

namespace llreg {

using Tensor = ad::Var<float>;

enum class BottleneckMode { FrozenSeeded, Trainable, StandardAttention };

std::string to_string(BottleneckMode m);
BottleneckMode parse_bottleneck_mode(const std::string& s);

struct ModelConfig {
    int64_t base_channels = 8;
    int64_t d_model = 256;
    int64_t heads = 4;
    int64_t stack_depth = 2;
    int64_t inner_multiple = 2;
    bool causal_mask = true;
    bool use_pos_embed = true;
    BottleneckMode bottleneck_mode = BottleneckMode::FrozenSeeded;
    int cascade_steps = 3;
    /// Grid the model is built for; fixes the token count of the position embedding.
    VolumeGeometry volume{32, 32, 32};
    /// Both encoder streams use one parameter set when true.
    bool shared_encoder = false;
    float leaky_slope = 0.2f;
    uint64_t seed = 7;
    /// Seed of the frozen stand-in transformer weights.
    uint64_t bottleneck_seed = 0x4c4c614d41ULL;

    static constexpr int kLevels = 4;

    int64_t token_count() const { return (volume.nx / 8) * (volume.ny / 8) * (volume.nz / 8); }
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void validate(const ModelConfig& cfg);

/// SwiGLU hidden width: 8/3 * d_model rounded up to a multiple of 64.
int64_t ffn_hidden_width(int64_t d_model);
/// Output width of the language-to-visual adapter for stage i in 1..4: 2^(2(i+1)) * C.
int64_t adapter_out_width(int stage, int64_t base_channels);
/// Channels of the reconstructed stage feature map: 2^(5-i) * C.
int64_t reconstructed_channels(int stage, int64_t base_channels);
/// Channels produced by stage i's fusion block: 2^(4-i) * C.
int64_t fused_channels(int stage, int64_t base_channels);

struct Phase {
    enum class Kind { Single, CascadeStep, Joint };
    Kind kind = Kind::Single;
    int step = 1;  // 1-based, CascadeStep only

    static Phase single() { return {Kind::Single, 1}; }
    static Phase cascade(int k) { return {Kind::CascadeStep, k}; }
    static Phase joint() { return {Kind::Joint, 0}; }
    /// Accepts "single", "joint" and "cascade_step_<k>".
    static Phase parse(const std::string& s);
    std::string str() const;
    /// Number of cascade steps the forward pass must run in this phase.
    int active_steps(int cascade_steps) const;
    friend bool operator==(const Phase&, const Phase&) = default;
};

enum class ParamGroup { Encoder, Bridge, Bottleneck, StepAdapter, StepDecoder };

struct ParamEntry {
    std::string name;
    Tensor var;
    ParamGroup group;
    int step = 0;  // 1-based for StepAdapter / StepDecoder, 0 otherwise
};

struct ParameterPartition {
    std::vector<std::string> trainable;
    std::vector<std::string> frozen;
};

struct EncoderPyramid {
    std::array<Tensor, 4> moving;  // full, 1/2, 1/4, 1/8
    std::array<Tensor, 4> fixed;
};

struct StepOutput {
    /// Field accumulated inside this step (full resolution).
    Tensor step_field;
    /// Composition of every step up to and including this one.
    Tensor total;
    /// Fusion features of S_1..S_4, handed to the next step.
    std::array<Tensor, 4> fused;
    /// Total field after S_2 and S_3 at their own grids (1/4, 1/2).
    std::array<Tensor, 2> stage_totals;
};

struct ForwardResult {
    Tensor field;
    std::vector<StepOutput> steps;
    std::vector<std::pair<std::string, ad::Shape>> shape_trace;
};

/// Shapes every named intermediate must have for `cfg`, in forward order.
std::vector<std::pair<std::string, ad::Shape>> planned_shapes(const ModelConfig& cfg, int steps);

class RegModel {
public:
    explicit RegModel(ModelConfig cfg);
    // Copies would alias parameter storage.
    RegModel(const RegModel&) = delete;
    RegModel& operator=(const RegModel&) = delete;
    RegModel(RegModel&&) = default;
    RegModel& operator=(RegModel&&) = default;

    const ModelConfig& config() const { return cfg_; }

    EncoderPyramid encode_pair(const Tensor& moving, const Tensor& fixed) const;
    /// Adapter0, position embedding, stack 1, inner adapter, stack 2 -> [tokens, d_model].
    Tensor llama_block_forward(const EncoderPyramid& pyramid) const;
    /// Projects tokens through step `step`'s adapter for stage i and voxel-shuffles
    /// them onto the stage grid.
    Tensor reconstruct_stage_features(const Tensor& tokens, int stage, int step = 1) const;

    /// Runs cascade steps 1..steps. moving/fixed are [nz, ny, nx, 1].
    ForwardResult forward(const Tensor& moving, const Tensor& fixed, int steps, bool trace_shapes = false) const;
    ForwardResult forward_single(const Tensor& moving, const Tensor& fixed) const { return forward(moving, fixed, 1); }

    /// Number of cascade steps with trained decoders (persisted in checkpoints).
    int trained_steps() const { return trained_steps_; }
    void set_trained_steps(int n) { trained_steps_ = n; }

    std::vector<ParamEntry>& parameters() { return params_; }
    const std::vector<ParamEntry>& parameters() const { return params_; }
    const ParamEntry* find(const std::string& name) const;

    ParameterPartition parameter_groups(const Phase& phase) const;
    /// Sets requires_grad on every parameter according to `phase`.
    void apply_phase(const Phase& phase);
    /// Marks every parameter frozen; inference only.
    void freeze_all();

    /// FNV-1a over the bit patterns of the selected parameters.
    uint64_t hash_parameters(const std::vector<std::string>& names) const;
    uint64_t hash_group(ParamGroup group, int step = 0) const;
    std::vector<std::string> names_in(ParamGroup group, int step = 0) const;

    /// Zeroes every field-head weight and bias.
    void zero_field_heads();
    void zero_all_convolutions();

private:
    struct Conv {
        Tensor w, b;
        int stride = 1;
    };
    struct Deconv {
        Tensor w, b;
    };
    struct Linear {
        Tensor w, b;
    };
    struct Layer {
        Tensor norm1, norm1_b, wq, wk, wv, wo, bq, bk, bv, bo;
        Tensor norm2, norm2_b, w1, w2, w3, b1, b2;
    };
    struct Stack {
        std::vector<Layer> layers;
        Tensor final_norm, final_norm_b;
    };
    struct Stream {
        std::array<std::vector<Conv>, 4> levels;
    };
    struct Step {
        std::array<Linear, 4> adapters;
        std::array<Conv, 4> fuse;
        std::array<Conv, 4> head;  // index 0 unused: S_1 emits no field
        std::array<Deconv, 3> up;
    };

    Tensor add_param(const std::string& name, ad::Shape shape, std::vector<float> data, ParamGroup g, int step);
    Conv make_conv(const std::string& name, int64_t ci, int64_t co, int stride, ParamGroup g, int step, bool zero = false);
    Deconv make_deconv(const std::string& name, int64_t ci, int64_t co, ParamGroup g, int step);
    Linear make_linear(const std::string& name, int64_t in, int64_t out, ParamGroup g, int step, bool bias = true,
                       uint64_t seed = 0, bool normal = false);
    Stack make_stack(const std::string& name);

    Tensor conv_block(const Conv& c, const Tensor& x) const;
    Tensor apply_linear(const Linear& l, const Tensor& x) const;
    Tensor stack_forward(const Stack& s, const Tensor& x) const;
    Tensor attention(const Layer& l, const Tensor& x) const;
    std::array<Tensor, 4> encode_stream(const Stream& s, const Tensor& image) const;

    ModelConfig cfg_;
    std::vector<ParamEntry> params_;
    int trained_steps_ = 0;

    Stream enc_moving_, enc_fixed_;
    Linear adapter0_a_, adapter0_b_;
    Tensor pos_embed_;
    Linear inner_a_, inner_b_;
    Stack stack1_, stack2_;
    std::vector<Step> steps_;
};

/// Registers moving onto fixed with steps 1..steps under no-grad.
DisplacementField predict_field(const RegModel& model, const ScalarVolume& moving, const ScalarVolume& fixed,
                                int steps);

}  // namespace llreg
