#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "llreg/evalkit.hpp"
#include "llreg/synthgen.hpp"
#include "llreg/trainer.hpp"

using namespace llreg;
namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "llreg_cli_test";

struct Run {
    int code = -1;
    std::string out;
};

Run cli(const std::string& args, const std::string& env = "") {
    static int counter = 0;
    const auto log = kWork / ("run" + std::to_string(counter++) + ".log");
    const std::string cmd = env + " " + LLREG_CLI_PATH + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(log);
    r.out.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string path(const std::string& name) { return (kWork / name).string(); }

const char* kSmallConfig = R"({
  "model": {"base_channels": 2, "d_model": 16, "heads": 2, "stack_depth": 1, "volume": [16, 16, 16]},
  "train": {"steps": 4, "log_every": 2, "deterministic": true}
})";

// One 16^3 dataset and config shared by the training cases.
void ensure_small_setup() {
    static bool done = false;
    if (done) return;
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    std::ofstream(path("small.json")) << kSmallConfig;
    REQUIRE(cli("gen-data --out " + path("d16") + " --size 16,16,16 --count 3 --seed 7 --max-disp 2").code == 0);
    done = true;
}

}  // namespace

TEST_CASE("help documents every flag and bad usage exits 2") {
    ensure_small_setup();
    const std::map<std::string, std::vector<std::string>> flags{
        {"gen-data", {"--out", "--size", "--count", "--seed", "--max-disp", "--smooth", "--config"}},
        {"train", {"--config", "--data", "--out", "--phase", "--resume", "--steps", "--holdout", "--lr", "--seed",
                   "--lambda", "--deterministic"}},
        {"register", {"--ckpt", "--moving", "--fixed", "--out-field", "--out-warped", "--steps"}},
        {"evaluate", {"--field", "--moving-seg", "--fixed-seg", "--report"}},
        {"gradcheck", {"--eps", "--tol", "--seed", "--seeds"}},
        {"inspect", {"--config", "--ckpt"}},
    };
    for (const auto& [cmd, names] : flags) {
        const auto r = cli(cmd + " --help");
        CHECK(r.code == 0);
        for (const auto& f : names) CHECK_MESSAGE(r.out.find(f) != std::string::npos, cmd << " " << f);
        CHECK(cli(cmd + " --no-such-flag").code == 2);
    }
    CHECK(cli("").code == 2);
    CHECK(cli("frobnicate").code == 2);
}

TEST_CASE("gen-data writes 5 files per pair plus a manifest, reproducibly") {
    ensure_small_setup();
    const auto dir = kWork / "d32";
    REQUIRE(cli("gen-data --out " + dir.string() + " --size 32,32,32 --count 4 --seed 7").code == 0);
    std::map<std::string, std::string> first;
    for (const auto& e : fs::directory_iterator(dir)) first[e.path().filename().string()] = slurp(e.path());
    CHECK(first.size() == 21);
    CHECK(first.count("manifest.txt") == 1);
    REQUIRE(cli("gen-data --out " + dir.string() + " --size 32,32,32 --count 4 --seed 7").code == 0);
    for (const auto& [name, bytes] : first) CHECK(slurp(dir / name) == bytes);

    const auto bad = cli("gen-data --out " + path("bad") + " --size 16,12,16 --count 2");
    CHECK(bad.code == 2);
    CHECK(bad.out.find("divisible by 8") != std::string::npos);
    CHECK(cli("gen-data --out " + path("bad") + " --size 16,16").code == 2);
}

TEST_CASE("train writes a checkpoint and its trace, and checks phase ordering") {
    ensure_small_setup();
    const auto r = cli("train --config " + path("small.json") + " --data " + path("d16") + " --out " + path("a.ckpt"));
    REQUIRE(r.code == 0);
    CHECK(r.out.find("effective config:") != std::string::npos);
    const auto trace = read_trace(path("a.ckpt.trace"));
    REQUIRE(trace.size() == 4);
    CHECK(trace.front().step == 0);
    const auto ck = load_checkpoint(path("a.ckpt"));
    CHECK(ck.model.trained_steps() == 1);
    CHECK(ck.model.config().d_model == 16);

    const auto early = cli("train --config " + path("small.json") + " --data " + path("d16") + " --out " +
                           path("b.ckpt") + " --phase cascade_step_2");
    CHECK(early.code == 2);
    const auto step2 = cli("train --config " + path("small.json") + " --data " + path("d16") + " --out " +
                           path("b.ckpt") + " --phase cascade_step_2 --resume " + path("a.ckpt"));
    CHECK(step2.code == 0);
    CHECK(load_checkpoint(path("b.ckpt")).model.trained_steps() == 2);

    const auto mismatch = cli("train --data " + path("d16") + " --out " + path("c.ckpt") + " --resume " +
                              path("a.ckpt"));
    CHECK(mismatch.code == 2);
    CHECK(mismatch.out.find("config mismatch") != std::string::npos);
    CHECK(cli("train --data " + path("nowhere") + " --out " + path("c.ckpt")).code == 2);
    CHECK(cli("train --config " + path("small.json") + " --data " + path("d16") + " --out " + path("c.ckpt") +
              " --holdout 3")
              .code == 2);
}

TEST_CASE("resumed training continues the trace at the saved step") {
    ensure_small_setup();
    const std::string base = "train --config " + path("small.json") + " --data " + path("d16");
    REQUIRE(cli(base + " --out " + path("full.ckpt") + " --steps 4").code == 0);
    REQUIRE(cli(base + " --out " + path("half.ckpt") + " --steps 2").code == 0);
    const auto r = cli(base + " --out " + path("rest.ckpt") + " --steps 4 --resume " + path("half.ckpt"));
    REQUIRE(r.code == 0);
    CHECK(r.out.find("resuming single at step 2") != std::string::npos);
    const auto full = read_trace(path("full.ckpt.trace"));
    const auto rest = read_trace(path("rest.ckpt.trace"));
    REQUIRE(rest.size() == 2);
    CHECK(rest[0].step == 2);
    CHECK(rest[0] == full[2]);
    CHECK(rest[1] == full[3]);
    CHECK(slurp(path("rest.ckpt")) == slurp(path("full.ckpt")));
}

TEST_CASE("a diverging run exits 1 and names the step") {
    ensure_small_setup();
    const auto r = cli("train --config " + path("small.json") + " --data " + path("d16") + " --out " +
                       path("nan.ckpt") + " --lr 1e30");
    CHECK(r.code == 1);
    CHECK(r.out.find("aborted at step") != std::string::npos);
}

TEST_CASE("register and evaluate") {
    ensure_small_setup();
    const auto d = kWork / "d16";
    const std::string pair = " --moving " + (d / "pair0_moving.vol").string() + " --fixed " +
                             (d / "pair0_fixed.vol").string();
    REQUIRE(cli("register --ckpt " + path("b.ckpt") + pair + " --out-field " + path("f.vol") + " --out-warped " +
                path("w.vol"))
                .code == 0);
    CHECK(read_displacement_field(path("f.vol")).geometry == VolumeGeometry{16, 16, 16});
    CHECK(read_scalar_volume(path("w.vol")).geometry == VolumeGeometry{16, 16, 16});
    CHECK(cli("register --ckpt " + path("missing.ckpt") + pair + " --out-field " + path("f.vol")).code == 2);
    const auto d32 = kWork / "d32";
    CHECK(cli("register --ckpt " + path("b.ckpt") + " --moving " + (d32 / "pair0_moving.vol").string() +
              " --fixed " + (d32 / "pair0_fixed.vol").string() + " --out-field " + path("g.vol"))
              .code == 2);

    const std::string segs = " --moving-seg " + (d / "pair0_movingseg.vol").string() + " --fixed-seg " +
                             (d / "pair0_fixedseg.vol").string();
    REQUIRE(cli("evaluate --field " + path("f.vol") + segs + " --report " + path("r.json")).code == 0);
    const auto report = EvalReport::from_json(slurp(path("r.json")));
    CHECK(report.dice_per_label.size() == 4);

    write_volume(DisplacementField({16, 16, 16}), path("zero.vol"));
    const auto same = cli("evaluate --field " + path("zero.vol") + " --moving-seg " +
                          (d / "pair0_fixedseg.vol").string() + " --fixed-seg " + (d / "pair0_fixedseg.vol").string() +
                          " --report " + path("same.json"));
    REQUIRE(same.code == 0);
    CHECK(EvalReport::from_json(slurp(path("same.json"))).mean_dice == 1.0);

    const auto gt = cli("evaluate --field " + (d32 / "pair1_gtfield.vol").string() + " --moving-seg " +
                        (d32 / "pair1_movingseg.vol").string() + " --fixed-seg " +
                        (d32 / "pair1_fixedseg.vol").string() + " --report " + path("gt.json"));
    REQUIRE(gt.code == 0);
    CHECK(EvalReport::from_json(slurp(path("gt.json"))).mean_dice >= 0.95);

    CHECK(cli("evaluate --field " + path("zero.vol") + " --moving-seg " + (d32 / "pair0_movingseg.vol").string() +
              " --fixed-seg " + (d32 / "pair0_fixedseg.vol").string())
              .code == 2);
}

TEST_CASE("gradcheck exit codes and reproducible text") {
    ensure_small_setup();
    const auto a = cli("gradcheck --seed 3");
    const auto b = cli("gradcheck --seed 3");
    CHECK(a.code == 0);
    CHECK(a.out == b.out);
    const auto strict = cli("gradcheck --tol 1e-12");
    CHECK(strict.code == 1);
    CHECK(strict.out.find("failing ops:") != std::string::npos);
    CHECK(cli("gradcheck --eps -1").code == 2);
}

TEST_CASE("config errors and runtime environment") {
    ensure_small_setup();
    std::ofstream(path("bad.json")) << R"({"model": {"d_modl": 8}})";
    const auto r = cli("train --config " + path("bad.json") + " --data " + path("d16") + " --out " + path("x.ckpt"));
    CHECK(r.code == 2);
    CHECK(r.out.find("model.d_modl: unknown key") != std::string::npos);
    CHECK(cli("inspect --config " + path("small.json"), "REG_THREADS=1 REG_DETERMINISTIC=1").code == 0);
    const auto insp = cli("inspect --config " + path("small.json"));
    CHECK(insp.out.find("bottleneck.y [8,16]") != std::string::npos);
}
