#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "llreg/model.hpp"
#include "llreg/objective.hpp"
#include "llreg/rng.hpp"
#include "llreg/warp.hpp"

using namespace llreg;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.base_channels = 2;
    c.d_model = 16;
    c.heads = 2;
    c.stack_depth = 1;
    c.volume = {16, 16, 16};
    return c;
}

Tensor random_image(const VolumeGeometry& g, uint64_t seed) {
    Rng rng(seed);
    std::vector<float> d(static_cast<size_t>(g.voxels()));
    for (auto& x : d) x = static_cast<float>(rng.uniform());
    return Tensor::constant({g.nz, g.ny, g.nx, 1}, d);
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

void randomize(RegModel& m, const std::string& needle, uint64_t seed, float scale) {
    Rng rng(seed);
    for (auto& p : m.parameters())
        if (p.name.find(needle) != std::string::npos)
            for (auto& v : p.var.mutable_data()) v = static_cast<float>(rng.uniform(-scale, scale));
}

bool contains(const std::vector<std::string>& v, const std::string& s) {
    return std::find(v.begin(), v.end(), s) != v.end();
}

}  // namespace

TEST_CASE("hidden width and stage channel arithmetic") {
    CHECK(ffn_hidden_width(256) == 704);
    CHECK(ffn_hidden_width(16) == 64);
    const int64_t C = 8;
    CHECK(adapter_out_width(1, C) == 16 * C);
    CHECK(adapter_out_width(2, C) == 64 * C);
    CHECK(adapter_out_width(3, C) == 256 * C);
    CHECK(adapter_out_width(4, C) == 1024 * C);
    for (int i = 1; i <= 4; ++i) {
        const int64_t r3 = int64_t{1} << (3 * (i - 1));
        CHECK(adapter_out_width(i, C) / r3 == reconstructed_channels(i, C));
    }
    CHECK_THROWS(adapter_out_width(5, C));
}

TEST_CASE("config validation") {
    ModelConfig c;
    CHECK_NOTHROW(validate(c));
    c.d_model = 20;
    c.heads = 4;
    CHECK_THROWS_WITH(validate(c), doctest::Contains("2*heads"));
    c = {};
    c.volume = {32, 32, 20};
    CHECK_THROWS_WITH(validate(c), doctest::Contains("divisible by 8"));
    c = {};
    c.cascade_steps = 0;
    CHECK_THROWS(validate(c));
    CHECK(parse_bottleneck_mode("standard_attention") == BottleneckMode::StandardAttention);
    CHECK_THROWS(parse_bottleneck_mode("pretrained7b"));
}

TEST_CASE("phase parsing") {
    CHECK(Phase::parse("single") == Phase::single());
    CHECK(Phase::parse("joint") == Phase::joint());
    CHECK(Phase::parse("cascade_step_2") == Phase::cascade(2));
    CHECK(Phase::parse("cascade_step_2").str() == "cascade_step_2");
    for (const char* bad : {"", "cascade_step_", "cascade_step_0", "cascade_step_x", "warmup"})
        CHECK_THROWS_AS(Phase::parse(bad), std::invalid_argument);
}

TEST_CASE("encoder pyramid at 32^3 with C=8") {
    ModelConfig cfg;
    RegModel m(cfg);
    const auto img = random_image(cfg.volume, 1);
    const auto p = m.encode_pair(img, img);
    for (int lvl = 0; lvl < 4; ++lvl) {
        const int64_t s = 32 >> lvl;
        CHECK(p.moving[lvl].shape() == ad::Shape{s, s, s, 8 << lvl});
        CHECK(p.fixed[lvl].shape() == ad::Shape{s, s, s, 8 << lvl});
    }
    CHECK(p.moving[3].shape() == ad::Shape{4, 4, 4, 64});
    // Independent stream weights: identical inputs still give different features.
    CHECK_FALSE(bitwise_equal(p.moving[3], p.fixed[3]));
}

TEST_CASE("shared encoder weights give identical pyramids for identical inputs") {
    auto cfg = small_config();
    cfg.shared_encoder = true;
    RegModel m(cfg);
    const auto img = random_image(cfg.volume, 2);
    const auto p = m.encode_pair(img, img);
    for (int lvl = 0; lvl < 4; ++lvl) CHECK(bitwise_equal(p.moving[lvl], p.fixed[lvl]));
}

TEST_CASE("zero inputs give finite features") {
    RegModel m(small_config());
    const auto zero = Tensor::zeros({16, 16, 16, 1});
    const auto p = m.encode_pair(zero, zero);
    for (const auto& f : p.moving)
        for (float v : f.data()) CHECK(std::isfinite(v));
    const auto y = m.llama_block_forward(p);
    for (float v : y.data()) CHECK(std::isfinite(v));
}

TEST_CASE("encode_pair rejects bad geometry") {
    RegModel m(small_config());
    CHECK_THROWS(m.encode_pair(Tensor::zeros({12, 16, 16, 1}), Tensor::zeros({12, 16, 16, 1})));
    CHECK_THROWS(m.encode_pair(Tensor::zeros({16, 16, 16, 1}), Tensor::zeros({8, 16, 16, 1})));
}

TEST_CASE("bottleneck: tokens, determinism and position embedding wiring") {
    ModelConfig cfg;
    RegModel m(cfg);
    const auto a = random_image(cfg.volume, 3), b = random_image(cfg.volume, 4);
    const auto p = m.encode_pair(a, b);
    const auto y1 = m.llama_block_forward(p);
    const auto y2 = m.llama_block_forward(p);
    CHECK(y1.shape() == ad::Shape{64, 256});
    CHECK(bitwise_equal(y1, y2));

    auto off = cfg;
    off.use_pos_embed = false;
    RegModel m2(off);
    CHECK(m2.find("pos_embed") == nullptr);
    REQUIRE(m.find("pos_embed") != nullptr);
    const auto y3 = m2.llama_block_forward(m2.encode_pair(a, b));
    CHECK_FALSE(bitwise_equal(y1, y3));
}

TEST_CASE("bottleneck rejects a token count that does not match the embedding") {
    RegModel m(small_config());
    const auto big = random_image({32, 32, 32}, 5);
    CHECK_THROWS_AS(m.llama_block_forward(m.encode_pair(big, big)), ad::ShapeError);
}

TEST_CASE("adapter widths and reconstructed stage features") {
    ModelConfig cfg;
    RegModel m(cfg);
    const int64_t C = cfg.base_channels;
    for (int k = 1; k <= cfg.cascade_steps; ++k)
        for (int i = 1; i <= 4; ++i) {
            const auto* w = m.find("step" + std::to_string(k) + ".adapter" + std::to_string(i) + ".w");
            REQUIRE(w != nullptr);
            CHECK(w->var.shape() == ad::Shape{adapter_out_width(i, C), cfg.d_model});
        }
    Rng rng(6);
    std::vector<float> t(64 * 256);
    for (auto& x : t) x = static_cast<float>(rng.normal());
    const auto tokens = Tensor::constant({64, 256}, t);
    const int64_t expected[4] = {16 * C, 8 * C, 4 * C, 2 * C};
    for (int i = 1; i <= 4; ++i) {
        const auto f = m.reconstruct_stage_features(tokens, i);
        const int64_t s = 4 << (i - 1);
        CHECK(f.shape() == ad::Shape{s, s, s, expected[i - 1]});
        CHECK(f.numel() == 64 * adapter_out_width(i, C));
    }
    CHECK_THROWS(m.reconstruct_stage_features(tokens, 0));
    CHECK_THROWS(m.reconstruct_stage_features(Tensor::zeros({63, 256}), 1));
}

TEST_CASE("shape walker matches the executed forward pass") {
    for (VolumeGeometry g : {VolumeGeometry{16, 16, 16}, VolumeGeometry{24, 16, 32}}) {
        auto cfg = small_config();
        cfg.volume = g;
        cfg.cascade_steps = 2;
        RegModel m(cfg);
        ad::NoGradGuard guard;
        const auto r = m.forward(random_image(g, 7), random_image(g, 8), 2, true);
        CHECK(r.shape_trace == planned_shapes(cfg, 2));
        CHECK(r.field.shape() == ad::Shape{g.nz, g.ny, g.nx, 3});
    }
}

TEST_CASE("zero-initialized heads give the identity transform") {
    auto cfg = small_config();
    RegModel m(cfg);
    const auto mov = random_image(cfg.volume, 9), fix = random_image(cfg.volume, 10);
    const auto r = m.forward(mov, fix, cfg.cascade_steps);
    for (float v : r.field.data()) CHECK(v == 0.0f);
    CHECK(bitwise_equal(warp(mov, r.field), mov));
    const auto loss = total_loss(mov, fix, r.field, 0.04);
    CHECK(loss.total.item() == mse(mov, fix).item());
}

TEST_CASE("all-zero convolutions give a zero field") {
    auto cfg = small_config();
    RegModel m(cfg);
    randomize(m, ".head.", 11, 0.1f);
    m.zero_all_convolutions();
    const auto mov = random_image(cfg.volume, 12);
    const auto phi = predict_field(m, to_scalar_volume(mov), to_scalar_volume(random_image(cfg.volume, 13)), 1);
    CHECK(phi.max_magnitude() == 0.0f);
    CHECK(apply_field(to_scalar_volume(mov), phi) == to_scalar_volume(mov));
}

TEST_CASE("cascade: one step equals forward_single, a zero step keeps the field") {
    auto cfg = small_config();
    RegModel m(cfg);
    randomize(m, "step1.S", 14, 0.05f);
    const auto mov = random_image(cfg.volume, 15), fix = random_image(cfg.volume, 16);
    ad::NoGradGuard guard;
    const auto single = m.forward_single(mov, fix);
    const auto one = m.forward(mov, fix, 1);
    CHECK(bitwise_equal(single.field, one.field));
    CHECK(single.field.data()[0] != 0.0f);
    const auto two = m.forward(mov, fix, 2);
    CHECK(bitwise_equal(two.steps[1].total, two.steps[0].total));
    CHECK(bitwise_equal(two.steps[0].total, single.field));

    randomize(m, "step2.S", 17, 0.05f);
    const auto changed = m.forward(mov, fix, 2);
    CHECK_FALSE(bitwise_equal(changed.field, single.field));
    CHECK(bitwise_equal(changed.steps[0].total, single.field));
    CHECK_THROWS(m.forward(mov, fix, cfg.cascade_steps + 1));
    CHECK_THROWS(m.forward(mov, fix, 0));
}

TEST_CASE("forward rejects inputs that differ from the model grid") {
    RegModel m(small_config());
    const auto g = random_image({24, 16, 16}, 18);
    CHECK_THROWS_AS(m.forward(g, g, 1), std::invalid_argument);
}

TEST_CASE("parameter groups per phase") {
    RegModel m(ModelConfig{});
    const auto single = m.parameter_groups(Phase::single());
    CHECK(contains(single.frozen, "stack1.layer0.wq.w"));
    CHECK(contains(single.frozen, "stack2.norm"));
    CHECK(contains(single.trainable, "encoder.moving.l1.conv0.w"));
    CHECK(contains(single.trainable, "adapter0.a.w"));
    CHECK(contains(single.trainable, "inner_adapter.b.w"));
    CHECK(contains(single.trainable, "pos_embed"));
    CHECK(contains(single.trainable, "step1.adapter3.w"));
    CHECK(contains(single.trainable, "step1.S4.head.w"));
    CHECK(contains(single.frozen, "step2.S4.head.w"));

    const auto c2 = m.parameter_groups(Phase::cascade(2));
    CHECK(contains(c2.frozen, "step1.S4.head.w"));
    CHECK(contains(c2.frozen, "encoder.fixed.l4.conv1.w"));
    CHECK(contains(c2.trainable, "step2.S4.head.w"));
    CHECK(contains(c2.trainable, "step2.adapter1.w"));
    CHECK(contains(c2.frozen, "step3.adapter1.w"));

    const auto joint = m.parameter_groups(Phase::joint());
    CHECK(contains(joint.frozen, "encoder.moving.l1.conv0.w"));
    for (int k = 1; k <= 3; ++k) CHECK(contains(joint.trainable, "step" + std::to_string(k) + ".S2.fuse.w"));

    std::set<std::string> all;
    for (const auto& p : m.parameters()) all.insert(p.name);
    CHECK(single.trainable.size() + single.frozen.size() == all.size());
    CHECK_THROWS(m.parameter_groups(Phase::cascade(4)));

    ModelConfig tc;
    tc.bottleneck_mode = BottleneckMode::Trainable;
    RegModel t(tc);
    CHECK(contains(t.parameter_groups(Phase::single()).trainable, "stack1.layer0.wq.w"));
    CHECK(contains(t.parameter_groups(Phase::cascade(2)).frozen, "stack1.layer0.wq.w"));

    ModelConfig sc;
    sc.bottleneck_mode = BottleneckMode::StandardAttention;
    RegModel s(sc);
    CHECK(contains(s.parameter_groups(Phase::single()).trainable, "stack1.layer0.w1.b"));
    CHECK(s.find("stack1.layer0.w3.w") == nullptr);
}

TEST_CASE("joint trains strictly more than any single cascade step") {
    auto cfg = small_config();
    RegModel m(cfg);
    auto decoder_count = [&](const Phase& ph) {
        size_t n = 0;
        for (const auto& name : m.parameter_groups(ph).trainable)
            if (name.rfind("step", 0) == 0) ++n;
        return n;
    };
    for (int k = 1; k <= cfg.cascade_steps; ++k) CHECK(decoder_count(Phase::joint()) > decoder_count(Phase::cascade(k)));
}

TEST_CASE("gradient reaches exactly the trainable partition") {
    auto cfg = small_config();
    RegModel m(cfg);
    randomize(m, ".head.", 19, 0.05f);
    const auto mov = random_image(cfg.volume, 20), fix = random_image(cfg.volume, 21);
    for (const Phase ph : {Phase::single(), Phase::cascade(2), Phase::joint()}) {
        m.apply_phase(ph);
        for (auto& p : m.parameters()) p.var.zero_grad();
        auto r = m.forward(mov, fix, ph.active_steps(cfg.cascade_steps));
        total_loss(mov, fix, r.field, 0.04).total.backward();
        const auto part = m.parameter_groups(ph);
        for (const auto& n : part.trainable) {
            INFO(ph.str() << " " << n);
            CHECK(m.find(n)->var.has_grad());
        }
        for (const auto& n : part.frozen) {
            INFO(ph.str() << " " << n);
            CHECK_FALSE(m.find(n)->var.has_grad());
        }
    }
}

TEST_CASE("parameter hashes") {
    RegModel a(small_config()), b(small_config());
    CHECK(a.hash_group(ParamGroup::Bottleneck) == b.hash_group(ParamGroup::Bottleneck));
    CHECK(a.hash_group(ParamGroup::StepDecoder, 1) == b.hash_group(ParamGroup::StepDecoder, 1));
    const uint64_t before = a.hash_group(ParamGroup::StepDecoder, 1);
    randomize(a, "step1.S3.fuse.b", 1, 0.1f);
    CHECK(a.hash_group(ParamGroup::StepDecoder, 1) != before);
    CHECK_THROWS(a.hash_parameters({"nope"}));

    auto other = small_config();
    other.bottleneck_seed = 99;
    RegModel c(other);
    CHECK(c.hash_group(ParamGroup::Bottleneck) != a.hash_group(ParamGroup::Bottleneck));
}
