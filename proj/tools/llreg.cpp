#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>

#include <CLI11.hpp>

#include "llreg/config.hpp"
#include "llreg/evalkit.hpp"
#include "llreg/gradcheck.hpp"
#include "llreg/runtime.hpp"
#include "llreg/synthgen.hpp"
#include "llreg/trainer.hpp"
#include "llreg/warp.hpp"

using namespace llreg;
namespace fs = std::filesystem;

namespace {

// Bad flags, missing inputs or violated preconditions: exit 2.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

void require_file(const std::string& what, const std::string& path) {
    if (!fs::is_regular_file(path)) throw UsageError(what + " not found: " + path);
}

void print_config(const char* title, const nlohmann::ordered_json& j) {
    std::cout << title << " " << j.dump() << "\n" << std::flush;
}

RunConfig base_config(const std::string& path) {
    if (path.empty()) return {};
    require_file("config", path);
    return load_run_config(path);
}

// gen-data ---------------------------------------------------------------------

struct GenArgs {
    std::string config, out, size;
    std::optional<int> count;
    std::optional<uint64_t> seed;
    std::optional<double> max_disp, smooth;
};

int run_gen(const GenArgs& a) {
    auto cfg = base_config(a.config).synth;
    if (!a.size.empty()) cfg.size = parse_size(a.size);
    if (a.count) cfg.count = *a.count;
    if (a.seed) cfg.seed = *a.seed;
    if (a.max_disp) cfg.max_disp = *a.max_disp;
    if (a.smooth) cfg.smooth_sigma = *a.smooth;
    validate(cfg);
    print_config("effective synth config:", to_json(cfg));
    const auto entries = gen_dataset(cfg, a.out);
    std::cout << "wrote " << entries.size() << " pairs to " << a.out << "\n";
    return 0;
}

// train ------------------------------------------------------------------------

struct TrainArgs {
    std::string config, data, out, phase, resume;
    std::optional<int> steps;
    int holdout = 0;
    std::optional<double> lr, lambda;
    std::optional<uint64_t> seed;
    bool deterministic = false;
};

int run_train(const TrainArgs& a) {
    auto cfg = base_config(a.config);
    if (!a.phase.empty()) cfg.train.phase = Phase::parse(a.phase);
    if (a.steps) cfg.train.steps = *a.steps;
    if (a.lr) cfg.train.lr = *a.lr;
    if (a.seed) cfg.train.seed = *a.seed;
    if (a.lambda) cfg.loss.lambda = *a.lambda;
    if (a.deterministic || deterministic()) cfg.train.deterministic = true;
    validate(cfg.model);
    validate(cfg.train);
    validate(cfg.loss);
    if (cfg.train.phase.kind == Phase::Kind::CascadeStep && cfg.train.phase.step > cfg.model.cascade_steps)
        throw UsageError("phase " + cfg.train.phase.str() + " exceeds cascade_steps " +
                         std::to_string(cfg.model.cascade_steps));
    if (!fs::exists(fs::path(a.data) / kManifestName)) throw UsageError("no dataset manifest in " + a.data);
    print_config("effective config:", to_json(cfg));

    std::optional<RegModel> model;
    std::optional<TrainState> resume_state;
    if (!a.resume.empty()) {
        require_file("checkpoint", a.resume);
        auto loaded = load_checkpoint(a.resume, &cfg.model);
        model.emplace(std::move(loaded.model));
        if (loaded.state && loaded.state->phase == cfg.train.phase) resume_state = loaded.state;
    } else {
        model.emplace(cfg.model);
    }
    const auto& phase = cfg.train.phase;
    if (phase.kind == Phase::Kind::CascadeStep && model->trained_steps() < phase.step - 1)
        throw UsageError("phase " + phase.str() + " needs a checkpoint with " + std::to_string(phase.step - 1) +
                         " trained cascade step(s); pass it with --resume");

    auto pairs = load_dataset(a.data);
    if (a.holdout < 0 || a.holdout >= static_cast<int>(pairs.size()))
        throw UsageError("--holdout must leave at least one of the " + std::to_string(pairs.size()) +
                         " pairs for training");
    pairs.resize(pairs.size() - static_cast<size_t>(a.holdout));
    std::vector<TrainPair> data;
    for (auto& p : pairs) {
        if (!(p.fixed.geometry == cfg.model.volume))
            throw UsageError("dataset geometry " + p.fixed.geometry.str() + " differs from model.volume " +
                             cfg.model.volume.str());
        data.push_back({std::move(p.moving), std::move(p.fixed)});
    }

    const fs::path out = a.out;
    const fs::path trace_path = out.string() + ".trace";
    write_trace({}, trace_path);
    TrainOptions opts;
    if (resume_state) {
        opts.resume = &*resume_state;
        std::cout << "resuming " << phase.str() << " at step " << resume_state->step << "\n";
    }
    const int log_every = cfg.train.log_every;
    opts.on_row = [&](const TraceRow& r) {
        write_trace({r}, trace_path, true);
        if (r.step % log_every == 0 || r.step + 1 == cfg.train.steps)
            std::printf("step %5d  loss %.6g  sim %.6g  reg %.6g\n", r.step, r.loss, r.sim, r.reg);
        std::fflush(stdout);
    };
    opts.checkpoint_every = log_every;
    opts.on_checkpoint = [&](const TrainState& st) { save_checkpoint(*model, out, &st); };

    const auto t0 = std::chrono::steady_clock::now();
    TrainResult result;
    try {
        result = train(*model, data, cfg.train, cfg.loss, opts);
    } catch (const TrainError& e) {
        std::cerr << "training aborted at step " << e.step() << ": " << e.what() << "\n";
        return 1;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    save_checkpoint(*model, out, &result.state);
    if (!result.trace.empty())
        std::printf("initial loss %.6g  final loss %.6g  (%zu steps, %.1f s)\n", result.trace.front().loss,
                    result.trace.back().loss, result.trace.size(), secs);
    std::cout << "checkpoint " << out.string() << " (trained cascade steps " << model->trained_steps() << ")\n";
    return 0;
}

// register ---------------------------------------------------------------------

struct RegisterArgs {
    std::string ckpt, moving, fixed, out_field, out_warped;
    std::optional<int> steps;
};

int run_register(const RegisterArgs& a) {
    require_file("checkpoint", a.ckpt);
    require_file("moving volume", a.moving);
    require_file("fixed volume", a.fixed);
    auto loaded = load_checkpoint(a.ckpt);
    const auto& model = loaded.model;
    const auto moving = read_scalar_volume(a.moving);
    const auto fixed = read_scalar_volume(a.fixed);
    const auto& g = model.config().volume;
    if (!(moving.geometry == g) || !(fixed.geometry == g))
        throw UsageError("input geometry " + moving.geometry.str() + " / " + fixed.geometry.str() +
                         " does not match the model grid " + g.str());
    int steps = a.steps.value_or(std::max(1, model.trained_steps()));
    if (steps < 1 || steps > model.config().cascade_steps)
        throw UsageError("--steps must be in [1, " + std::to_string(model.config().cascade_steps) + "]");

    const auto t0 = std::chrono::steady_clock::now();
    const auto phi = predict_field(model, moving, fixed, steps);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    write_volume(phi, a.out_field);
    if (!a.out_warped.empty()) write_volume(apply_field(moving, phi), a.out_warped);
    std::printf("registered with %d cascade step(s) in %.1f ms, max |u| %.4f, folds %.4f%%\n", steps, ms,
                phi.max_magnitude(), fold_fraction(phi));
    return 0;
}

// evaluate ---------------------------------------------------------------------

struct EvaluateArgs {
    std::string field, moving_seg, fixed_seg, report;
};

int run_evaluate(const EvaluateArgs& a) {
    require_file("field", a.field);
    require_file("moving segmentation", a.moving_seg);
    require_file("fixed segmentation", a.fixed_seg);
    const auto phi = read_displacement_field(a.field);
    const auto seg_m = read_label_volume(a.moving_seg);
    const auto seg_f = read_label_volume(a.fixed_seg);
    if (!(phi.geometry == seg_m.geometry) || !(phi.geometry == seg_f.geometry))
        throw UsageError("geometry mismatch: field " + phi.geometry.str() + ", moving seg " + seg_m.geometry.str() +
                         ", fixed seg " + seg_f.geometry.str());
    const auto report = evaluate_field(phi, seg_m, seg_f);
    const auto text = report.to_json();
    std::cout << text << "\n";
    if (!a.report.empty()) {
        std::ofstream f(a.report);
        if (!f) throw std::runtime_error("cannot write report " + a.report);
        f << text << "\n";
    }
    return 0;
}

// gradcheck --------------------------------------------------------------------

struct GradcheckArgs {
    double eps = 1e-5, tol = 1e-4;
    uint64_t seed = 7;
    int seeds = 1;
};

int run_gradcheck(const GradcheckArgs& a) {
    if (!(a.eps > 0.0) || !(a.tol > 0.0)) throw UsageError("--eps and --tol must be > 0");
    if (a.seeds < 1) throw UsageError("--seeds must be >= 1");
    const auto report = run_gradcheck_suite(builtin_gradcheck_cases(), a.seed, a.seeds, a.eps, a.tol);
    std::cout << report.text();
    if (report.passed()) return 0;
    std::cerr << "failing ops:";
    for (const auto& op : report.failing()) std::cerr << " " << op;
    std::cerr << "\n";
    return 1;
}

// inspect ----------------------------------------------------------------------

int run_inspect(const std::string& config, const std::string& ckpt) {
    std::optional<RegModel> model;
    if (!ckpt.empty()) {
        require_file("checkpoint", ckpt);
        model.emplace(load_checkpoint(ckpt).model);
    } else {
        auto cfg = base_config(config).model;
        validate(cfg);
        model.emplace(cfg);
    }
    const auto& cfg = model->config();
    print_config("model config:", to_json(cfg));
    std::cout << "trained cascade steps " << model->trained_steps() << "\n";
    const char* names[] = {"encoder", "bridge", "bottleneck", "step_adapter", "step_decoder"};
    int64_t counts[5] = {};
    for (const auto& p : model->parameters()) counts[static_cast<int>(p.group)] += p.var.numel();
    for (int i = 0; i < 5; ++i) std::printf("%-13s %10lld parameters\n", names[i], static_cast<long long>(counts[i]));
    for (int i = 1; i <= 4; ++i)
        std::printf("stage %d adapter width %lld, reconstructed channels %lld\n", i,
                    static_cast<long long>(adapter_out_width(i, cfg.base_channels)),
                    static_cast<long long>(reconstructed_channels(i, cfg.base_channels)));
    for (const auto& [name, shape] : planned_shapes(cfg, cfg.cascade_steps)) {
        std::cout << name << " [";
        for (size_t k = 0; k < shape.size(); ++k) std::cout << (k ? "," : "") << shape[k];
        std::cout << "]\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    configure_runtime_from_env();

    CLI::App app{"Unsupervised 3D deformable registration with a frozen transformer bottleneck"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic dataset of volume pairs");
    gen_cmd->add_option("--out", gen.out, "Output directory")->required();
    gen_cmd->add_option("--size", gen.size, "Volume size X,Y,Z (each divisible by 8)");
    gen_cmd->add_option("--count", gen.count, "Number of pairs");
    gen_cmd->add_option("--seed", gen.seed, "Generator seed");
    gen_cmd->add_option("--max-disp", gen.max_disp, "Largest displacement in voxels");
    gen_cmd->add_option("--smooth", gen.smooth, "Gaussian sigma of the displacement noise in voxels");
    gen_cmd->add_option("--config", gen.config, "JSON run config; its synth section is the base");

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Train one phase and write a checkpoint plus CKPT.trace");
    train_cmd->add_option("--config", tr.config, "JSON run config (model, train, loss, synth sections)");
    train_cmd->add_option("--data", tr.data, "Dataset directory written by gen-data")->required();
    train_cmd->add_option("--out", tr.out, "Checkpoint to write")->required();
    train_cmd->add_option("--phase", tr.phase, "single, cascade_step_<k> or joint");
    train_cmd->add_option("--resume", tr.resume,
                          "Start from this checkpoint; continues its run when the phase matches");
    train_cmd->add_option("--steps", tr.steps, "Override train.steps");
    train_cmd->add_option("--holdout", tr.holdout, "Leave the last N pairs of the manifest out of training");
    train_cmd->add_option("--lr", tr.lr, "Override train.lr");
    train_cmd->add_option("--seed", tr.seed, "Override train.seed");
    train_cmd->add_option("--lambda", tr.lambda, "Override loss.lambda");
    train_cmd->add_flag("--deterministic", tr.deterministic, "Single-threaded, bitwise reproducible run");

    RegisterArgs rg;
    auto* reg_cmd = app.add_subcommand("register", "Predict the field registering a moving volume onto a fixed one");
    reg_cmd->add_option("--ckpt", rg.ckpt, "Trained checkpoint")->required();
    reg_cmd->add_option("--moving", rg.moving, "Moving volume")->required();
    reg_cmd->add_option("--fixed", rg.fixed, "Fixed volume")->required();
    reg_cmd->add_option("--out-field", rg.out_field, "Displacement field to write")->required();
    reg_cmd->add_option("--out-warped", rg.out_warped, "Warped moving volume to write");
    reg_cmd->add_option("--steps", rg.steps, "Cascade steps to run (default: all trained)");

    EvaluateArgs ev;
    auto* eval_cmd = app.add_subcommand("evaluate", "Score a field with Dice and the folding percentage");
    eval_cmd->add_option("--field", ev.field, "Displacement field")->required();
    eval_cmd->add_option("--moving-seg", ev.moving_seg, "Moving label map")->required();
    eval_cmd->add_option("--fixed-seg", ev.fixed_seg, "Fixed label map")->required();
    eval_cmd->add_option("--report", ev.report, "Also write the JSON report here");

    GradcheckArgs gc;
    auto* gc_cmd = app.add_subcommand("gradcheck", "Check every differentiable op against finite differences");
    gc_cmd->add_option("--eps", gc.eps, "Finite-difference step")->capture_default_str();
    gc_cmd->add_option("--tol", gc.tol, "Largest allowed relative error")->capture_default_str();
    gc_cmd->add_option("--seed", gc.seed, "Input seed")->capture_default_str();
    gc_cmd->add_option("--seeds", gc.seeds, "Number of consecutive seeds")->capture_default_str();

    std::string insp_config, insp_ckpt;
    auto* insp_cmd = app.add_subcommand("inspect", "Print parameter counts and intermediate shapes");
    insp_cmd->add_option("--config", insp_config, "JSON run config");
    insp_cmd->add_option("--ckpt", insp_ckpt, "Checkpoint to inspect instead of a config");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*gen_cmd) return run_gen(gen);
        if (*train_cmd) return run_train(tr);
        if (*reg_cmd) return run_register(rg);
        if (*eval_cmd) return run_evaluate(ev);
        if (*gc_cmd) return run_gradcheck(gc);
        if (*insp_cmd) return run_inspect(insp_config, insp_ckpt);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const CheckpointError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return std::string(e.what()).rfind("config mismatch", 0) == 0 ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
