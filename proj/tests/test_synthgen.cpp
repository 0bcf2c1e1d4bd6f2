#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <iterator>

#include "llreg/evalkit.hpp"
#include "llreg/synthgen.hpp"
#include "llreg/warp.hpp"

using namespace llreg;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("llreg_synth_" + name);
    fs::remove_all(p);
    return p;
}

std::vector<char> file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double unregistered_dice(const SynthPair& p) {
    return evaluate_field(DisplacementField(p.fixed.geometry), p.moving_seg, p.fixed_seg).mean_dice;
}

}  // namespace

TEST_CASE("config validation") {
    SynthConfig c;
    CHECK_NOTHROW(validate(c));
    c.size = {32, 30, 32};
    CHECK_THROWS_WITH_AS(validate(c), doctest::Contains("divisible by 8"), std::invalid_argument);
    c = {};
    c.max_disp = 8.0;
    CHECK_THROWS_AS(validate(c), std::invalid_argument);
    c = {};
    c.count = 0;
    CHECK_THROWS_AS(validate(c), std::invalid_argument);
}

TEST_CASE("zero displacement leaves the moving image equal to the fixed one") {
    SynthConfig c;
    c.max_disp = 0.0;
    const auto p = gen_pair(c, 3);
    CHECK(p.moving == p.fixed);
    CHECK(p.moving_seg == p.fixed_seg);
    CHECK(p.gt_field.max_magnitude() == 0.0f);
}

TEST_CASE("pairs are determined by seed and index") {
    SynthConfig c;
    const auto a = gen_pair(c, 5), b = gen_pair(c, 5), other = gen_pair(c, 6);
    CHECK(a.fixed == b.fixed);
    CHECK(a.moving == b.moving);
    CHECK(a.fixed_seg == b.fixed_seg);
    CHECK(a.moving_seg == b.moving_seg);
    CHECK(a.gt_field == b.gt_field);
    CHECK_FALSE(a.fixed == other.fixed);
    c.seed = 8;
    CHECK_FALSE(gen_pair(c, 5).fixed == a.fixed);
}

TEST_CASE("shapes carry labels 1..n_shapes and intensities stay in [0,1]") {
    SynthConfig c;
    const auto p = gen_pair(c, 0);
    std::vector<int> seen(c.n_shapes + 1, 0);
    for (uint32_t l : p.fixed_seg.data) {
        REQUIRE(l <= uint32_t(c.n_shapes));
        seen[l] = 1;
    }
    for (int l = 0; l <= c.n_shapes; ++l) CHECK(seen[l] == 1);
    for (const auto* v : {&p.fixed, &p.moving})
        for (float x : v->data) {
            CHECK(x >= 0.0f);
            CHECK(x <= 1.0f);
        }
}

TEST_CASE("ground-truth fields are fold-free and register to Dice >= 0.95 over 100 pairs") {
    SynthConfig c;
    int fold_free = 0, above = 0;
    double worst = 1.0;
    for (int i = 0; i < 100; ++i) {
        const auto p = gen_pair(c, i);
        const auto r = evaluate_field(p.gt_field, p.moving_seg, p.fixed_seg);
        fold_free += r.pct_nonpos_jacobian == 0.0;
        above += r.mean_dice >= 0.95;
        worst = std::min(worst, r.mean_dice);
        for (float x : p.moving.data) REQUIRE((x >= 0.0f && x <= 1.0f));
    }
    MESSAGE("worst ground-truth Dice " << worst);
    CHECK(fold_free == 100);
    CHECK(above == 100);
}

TEST_CASE("inverse field undoes the forward displacement") {
    SynthConfig c;
    c.size = {16, 16, 16};
    c.max_disp = 2.0;
    const auto p = gen_pair(c, 1);
    const auto psi = invert_field(p.gt_field);
    const auto round = compose(psi, p.gt_field);
    float worst = 0.0f;
    for (int64_t z = 4; z < 12; ++z)
        for (int64_t y = 4; y < 12; ++y)
            for (int64_t x = 4; x < 12; ++x) {
                const auto u = round.at(x, y, z);
                worst = std::max({worst, std::abs(u[0]), std::abs(u[1]), std::abs(u[2])});
            }
    CHECK(worst < 0.05f);
}

TEST_CASE("initial misalignment: mean unregistered Dice < 0.9 for max_disp >= 3") {
    for (double d : {3.0, 4.0}) {
        SynthConfig c;
        c.max_disp = d;
        double acc = 0.0;
        for (int i = 0; i < 20; ++i) acc += unregistered_dice(gen_pair(c, i));
        const double mean = acc / 20.0;
        INFO("max_disp " << d << " mean unregistered Dice " << mean);
        CHECK(mean < 0.9);
    }
}

TEST_CASE("dataset files, manifest and byte-identical reruns") {
    SynthConfig c;
    c.size = {16, 16, 16};
    c.max_disp = 2.0;
    c.count = 2;
    const auto dir = scratch_dir("ds");
    const auto entries = gen_dataset(c, dir);
    CHECK(entries.size() == 2);
    int files = 0;
    for (const auto& e : fs::directory_iterator(dir)) files += e.path().extension() == ".vol";
    CHECK(files == 10);
    CHECK(fs::exists(dir / kManifestName));
    CHECK(fs::exists(dir / "pair1_movingseg.vol"));
    CHECK(read_manifest(dir).size() == size_t(c.count));

    std::map<std::string, std::vector<char>> before;
    for (const auto& e : fs::directory_iterator(dir)) before[e.path().filename().string()] = file_bytes(e.path());
    gen_dataset(c, dir);
    for (const auto& [name, bytes] : before) CHECK(file_bytes(dir / name) == bytes);

    const auto loaded = load_dataset(dir);
    const auto p = gen_pair(c, 1);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[1].fixed == p.fixed);
    CHECK(loaded[1].moving_seg == p.moving_seg);
    CHECK(loaded[1].gt_field == p.gt_field);
    fs::remove_all(dir);
}
