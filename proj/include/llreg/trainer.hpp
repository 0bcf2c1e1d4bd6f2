#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "llreg/model.hpp"
#include "llreg/objective.hpp"
#include "llreg/volume.hpp"

namespace llreg {

struct TrainConfig {
    double lr = 1e-4;
    int steps = 500;
    uint64_t seed = 7;
    Phase phase = Phase::single();
    int log_every = 50;
    bool deterministic = false;
};

void validate(const TrainConfig& cfg);

struct TrainPair {
    ScalarVolume moving;
    ScalarVolume fixed;
};

struct TraceRow {
    int step = 0;
    double loss = 0.0, sim = 0.0, reg = 0.0;
    friend bool operator==(const TraceRow&, const TraceRow&) = default;
};

struct AdamState {
    static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    std::map<std::string, std::vector<float>> m, v;
    int64_t t = 0;
};

/// Everything needed to continue an interrupted phase.
struct TrainState {
    Phase phase = Phase::single();
    int step = 0;  // steps completed in this phase
    AdamState adam;
};

/// Non-finite loss; carries the failing step.
class TrainError : public std::runtime_error {
public:
    TrainError(int step, const std::string& what) : std::runtime_error(what), step_(step) {}
    int step() const { return step_; }

private:
    int step_;
};

struct TrainOptions {
    /// Continue from this state instead of starting fresh. Its phase must match.
    const TrainState* resume = nullptr;
    /// Called with every trace row as it is produced.
    std::function<void(const TraceRow&)> on_row;
    /// Called with the running state after every `checkpoint_every` completed steps.
    int checkpoint_every = 0;
    std::function<void(const TrainState&)> on_checkpoint;
};

struct TrainResult {
    std::vector<TraceRow> trace;
    TrainState state;
};

/// One Adam update on every parameter that currently requires grad and has a gradient.
void adam_step(RegModel& model, AdamState& state, double lr);

/// Loss of the model's field after `steps` cascade steps, including the optional
/// deep-supervision terms.
LossTerms<float> registration_loss(const RegModel& model, const Tensor& moving, const Tensor& fixed, int steps,
                                   const LossConfig& loss);

/// Mean total loss over the dataset under no-grad.
double dataset_loss(const RegModel& model, const std::vector<TrainPair>& data, int steps, const LossConfig& loss);

TrainResult train(RegModel& model, const std::vector<TrainPair>& data, const TrainConfig& cfg,
                  const LossConfig& loss, const TrainOptions& opts = {});

enum class CascadeMode { StepByStep, Joint };

/// step_by_step: one train() per step k with phase cascade_step_k (cfgs.size() == cascade_steps).
/// joint: cfgs[0] trains step 1 (encoder and bridge included), cfgs[1] then trains every
/// step decoder together with the encoder frozen.
std::vector<TrainResult> train_cascade(RegModel& model, const std::vector<TrainPair>& data,
                                       std::vector<TrainConfig> cfgs, CascadeMode mode, const LossConfig& loss,
                                       const std::function<void(const TrainResult&, const RegModel&)>& on_phase = {});

void write_trace(const std::vector<TraceRow>& rows, const std::filesystem::path& path, bool append = false);
std::vector<TraceRow> read_trace(const std::filesystem::path& path);

// Checkpoints ----------------------------------------------------------------

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void save_checkpoint(const RegModel& model, const std::filesystem::path& path, const TrainState* state = nullptr);

struct LoadedCheckpoint {
    RegModel model;
    std::optional<TrainState> state;
};

/// Throws CheckpointError("checkpoint corrupt: ...") on malformed files and
/// ("config mismatch: ...") when `expected` is given and differs in architecture.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

}  // namespace llreg
