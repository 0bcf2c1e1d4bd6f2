#include "llreg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "llreg/objective.hpp"
#include "llreg/warp.hpp"

namespace llreg {

using V = ad::Var<double>;

namespace {

constexpr double kRelFloor = 1e-3;

std::vector<double> uniform_values(Rng& rng, int64_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

/// Values bounded away from zero, for ops with a kink at the origin.
std::vector<double> away_from_zero(Rng& rng, int64_t n) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) {
        const double mag = rng.uniform(0.05, 1.0);
        x = rng.uniform() < 0.5 ? -mag : mag;
    }
    return v;
}

V param(Rng& rng, ad::Shape s) {
    const auto n = ad::numel(s);
    return V::parameter(std::move(s), uniform_values(rng, n));
}

int64_t dim(Rng& rng, int64_t lo, int64_t hi) { return rng.uniform_int(lo, hi); }

/// Displacements whose sample points are interior and at least 0.15 voxel
/// away from every lattice plane.
V off_lattice_field(Rng& rng, int64_t d, int64_t h, int64_t w) {
    std::vector<double> u(static_cast<std::size_t>(d * h * w * 3));
    const int64_t n[3] = {w, h, d};
    for (int64_t z = 0; z < d; ++z)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                const int64_t p = (z * h + y) * w + x;
                const int64_t pos[3] = {x, y, z};
                for (int c = 0; c < 3; ++c) {
                    const int64_t base = n[c] > 1 ? rng.uniform_int(0, n[c] - 2) : 0;
                    const double target = n[c] > 1 ? double(base) + rng.uniform(0.15, 0.85) : 0.0;
                    u[3 * p + c] = target - double(pos[c]);
                }
            }
    return V::parameter({d, h, w, 3}, std::move(u));
}

}  // namespace

GradcheckResult gradcheck(const GradcheckCase& c, uint64_t seed, double eps, double tol) {
    Rng rng(seed);
    auto inputs = c.make_inputs(rng);
    GradcheckResult res{c.name, 0.0, 0, true};

    // Analytic gradients of sum(R * f(x)).
    auto out = c.fn(inputs);
    const auto proj = uniform_values(rng, out.numel());
    auto loss = ad::sum(ad::mul(out, V::constant(out.shape(), proj)));
    loss.backward();

    auto projected = [&]() {
        ad::NoGradGuard guard;
        const auto y = c.fn(inputs);
        double s = 0.0;
        for (std::size_t i = 0; i < proj.size(); ++i) s += proj[i] * y.values()[i];
        return s;
    };

    for (auto& in : inputs) {
        if (!in.requires_grad()) continue;
        const std::vector<double> analytic = in.has_grad() ? std::vector<double>(in.grad().begin(), in.grad().end())
                                                           : std::vector<double>(in.numel(), 0.0);
        auto data = in.mutable_data();
        for (int64_t i = 0; i < in.numel(); ++i) {
            const double saved = data[i];
            data[i] = saved + eps;
            const double fp = projected();
            data[i] = saved - eps;
            const double fm = projected();
            data[i] = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), kRelFloor});
            const double err = std::abs(analytic[i] - numeric) / denom;
            res.max_rel_error = std::max(res.max_rel_error, std::isfinite(err) ? err : 1e300);
            ++res.entries;
        }
    }
    res.passed = res.max_rel_error < tol;
    return res;
}

bool GradcheckReport::passed() const {
    return std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
}

std::vector<std::string> GradcheckReport::failing() const {
    std::vector<std::string> out;
    for (const auto& r : results)
        if (!r.passed) out.push_back(r.op);
    return out;
}

std::string GradcheckReport::text() const {
    std::ostringstream os;
    char line[160];
    for (const auto& r : results) {
        std::snprintf(line, sizeof line, "%-22s max_rel_err=%.3e entries=%-7lld %s\n", r.op.c_str(), r.max_rel_error,
                      static_cast<long long>(r.entries), r.passed ? "PASS" : "FAIL");
        os << line;
    }
    os << (passed() ? "all ops passed" : "FAILED") << "\n";
    return os.str();
}

GradcheckReport run_gradcheck_suite(const std::vector<GradcheckCase>& cases, uint64_t seed, int seed_count,
                                    double eps, double tol) {
    GradcheckReport report;
    for (const auto& c : cases) {
        GradcheckResult worst{c.name, 0.0, 0, true};
        for (int s = 0; s < seed_count; ++s) {
            const auto r = gradcheck(c, derive_seed(seed + static_cast<uint64_t>(s), c.name), eps, tol);
            worst.max_rel_error = std::max(worst.max_rel_error, r.max_rel_error);
            worst.entries += r.entries;
            worst.passed = worst.passed && r.passed;
        }
        report.results.push_back(worst);
    }
    return report;
}

std::vector<GradcheckCase> builtin_gradcheck_cases() {
    std::vector<GradcheckCase> cases;
    auto add_case = [&](std::string name, auto make, auto fn) {
        cases.push_back({std::move(name), make, fn});
    };
    auto pair2d = [](Rng& r) {
        const ad::Shape s{dim(r, 1, 5), dim(r, 1, 5)};
        return std::vector<V>{param(r, s), param(r, s)};
    };
    auto one2d = [](Rng& r) { return std::vector<V>{param(r, {dim(r, 1, 5), dim(r, 1, 6)})}; };

    add_case("add", pair2d, [](const std::vector<V>& v) { return ad::add(v[0], v[1]); });
    add_case("sub", pair2d, [](const std::vector<V>& v) { return ad::sub(v[0], v[1]); });
    add_case("mul", pair2d, [](const std::vector<V>& v) { return ad::mul(v[0], v[1]); });
    add_case("scale", one2d, [](const std::vector<V>& v) { return ad::scale(v[0], -1.7); });
    add_case("square", one2d, [](const std::vector<V>& v) { return ad::square(v[0]); });
    add_case("sum", one2d, [](const std::vector<V>& v) { return ad::sum(v[0]); });
    add_case("mean", one2d, [](const std::vector<V>& v) { return ad::mean(v[0]); });
    add_case(
        "leaky_relu",
        [](Rng& r) {
            const ad::Shape s{dim(r, 1, 5), dim(r, 1, 6)};
            return std::vector<V>{V::parameter(s, away_from_zero(r, ad::numel(s)))};
        },
        [](const std::vector<V>& v) { return ad::leaky_relu(v[0], 0.2); });
    add_case("silu", one2d, [](const std::vector<V>& v) { return ad::silu(v[0]); });
    add_case("gelu", one2d, [](const std::vector<V>& v) { return ad::gelu(v[0]); });

    add_case(
        "matmul",
        [](Rng& r) {
            const int64_t m = dim(r, 1, 5), k = dim(r, 1, 5), n = dim(r, 1, 5);
            return std::vector<V>{param(r, {m, k}), param(r, {k, n})};
        },
        [](const std::vector<V>& v) { return ad::matmul(v[0], v[1]); });
    add_case("transpose", one2d, [](const std::vector<V>& v) { return ad::transpose(v[0]); });
    add_case(
        "linear",
        [](Rng& r) {
            const int64_t n = dim(r, 1, 5), in = dim(r, 1, 6), out = dim(r, 1, 6);
            return std::vector<V>{param(r, {n, in}), param(r, {out, in}), param(r, {out})};
        },
        [](const std::vector<V>& v) { return ad::linear(v[0], v[1], v[2]); });

    auto conv_inputs = [](int64_t max_side) {
        return [max_side](Rng& r) {
            const int64_t d = dim(r, 1, max_side), h = dim(r, 1, max_side), w = dim(r, 1, max_side);
            const int64_t ci = dim(r, 1, 3), co = dim(r, 1, 3);
            return std::vector<V>{param(r, {d, h, w, ci}), param(r, {3, 3, 3, ci, co}), param(r, {co})};
        };
    };
    add_case("conv3d_stride1", conv_inputs(6),
             [](const std::vector<V>& v) { return ad::conv3d(v[0], v[1], v[2], 1); });
    add_case("conv3d_stride2", conv_inputs(6),
             [](const std::vector<V>& v) { return ad::conv3d(v[0], v[1], v[2], 2); });
    add_case(
        "conv_transpose3d",
        [](Rng& r) {
            const int64_t d = dim(r, 1, 3), h = dim(r, 1, 3), w = dim(r, 1, 3), ci = dim(r, 1, 3), co = dim(r, 1, 3);
            return std::vector<V>{param(r, {d, h, w, ci}), param(r, {ci, 2, 2, 2, co}), param(r, {co})};
        },
        [](const std::vector<V>& v) { return ad::conv_transpose3d(v[0], v[1], v[2]); });

    add_case(
        "gather_trilinear",
        [](Rng& r) {
            const int64_t d = dim(r, 2, 6), h = dim(r, 2, 6), w = dim(r, 2, 6), c = dim(r, 1, 3);
            return std::vector<V>{param(r, {d, h, w, c}), off_lattice_field(r, d, h, w)};
        },
        [](const std::vector<V>& v) { return ad::gather_trilinear(v[0], v[1]); });
    add_case(
        "resample_trilinear",
        [](Rng& r) {
            const int64_t d = dim(r, 1, 6), h = dim(r, 1, 6), w = dim(r, 1, 6), c = dim(r, 1, 3);
            auto x = param(r, {d, h, w, c});
            // target extents ride along as a constant
            auto target = V::constant({3}, {double(dim(r, 1, 6)), double(dim(r, 1, 6)), double(dim(r, 1, 6))});
            return std::vector<V>{x, target};
        },
        [](const std::vector<V>& v) {
            const auto& t = v[1].values();
            return ad::resample_trilinear(v[0], int64_t(t[0]), int64_t(t[1]), int64_t(t[2]));
        });
    add_case(
        "voxel_shuffle",
        [](Rng& r) {
            const int64_t d = dim(r, 1, 3), h = dim(r, 1, 3), w = dim(r, 1, 3), c = dim(r, 1, 2);
            return std::vector<V>{param(r, {d, h, w, 8 * c})};
        },
        [](const std::vector<V>& v) { return ad::voxel_shuffle(v[0], 2); });

    add_case(
        "softmax",
        [](Rng& r) {
            auto x = param(r, {dim(r, 1, 4), dim(r, 1, 4), dim(r, 2, 5)});
            auto axis = V::constant({1}, {double(dim(r, 0, 2))});
            return std::vector<V>{x, axis};
        },
        [](const std::vector<V>& v) { return ad::softmax(v[0], int(v[1].values()[0])); });
    add_case(
        "causal_softmax",
        [](Rng& r) {
            const int64_t n = dim(r, 1, 6);
            return std::vector<V>{param(r, {n, n})};
        },
        [](const std::vector<V>& v) { return ad::softmax(ad::causal_mask(v[0]), -1); });
    add_case(
        "rms_norm",
        [](Rng& r) {
            const int64_t n = dim(r, 1, 4), d = dim(r, 2, 8);
            return std::vector<V>{param(r, {n, d}), param(r, {d})};
        },
        [](const std::vector<V>& v) { return ad::rms_norm(v[0], v[1], 1e-6); });
    add_case(
        "layer_norm",
        [](Rng& r) {
            const int64_t n = dim(r, 1, 4), d = dim(r, 2, 8);
            return std::vector<V>{param(r, {n, d}), param(r, {d}), param(r, {d})};
        },
        [](const std::vector<V>& v) { return ad::layer_norm(v[0], v[1], v[2], 1e-5); });
    add_case(
        "rotary_embed",
        [](Rng& r) {
            const int64_t n = dim(r, 1, 6), heads = dim(r, 1, 3), hd = 2 * dim(r, 1, 3);
            auto x = param(r, {n, heads * hd});
            return std::vector<V>{x, V::constant({1}, {double(hd)})};
        },
        [](const std::vector<V>& v) { return ad::rotary_embed(v[0], int64_t(v[1].values()[0])); });

    add_case(
        "concat",
        [](Rng& r) {
            const int64_t a = dim(r, 1, 3), b = dim(r, 1, 3), c = dim(r, 1, 3);
            const int axis = int(dim(r, 0, 2));
            ad::Shape s1{a, b, c}, s2{a, b, c};
            s2[axis] = dim(r, 1, 3);
            return std::vector<V>{param(r, s1), param(r, s2), V::constant({1}, {double(axis)})};
        },
        [](const std::vector<V>& v) { return ad::concat<double>({v[0], v[1]}, int(v[2].values()[0])); });
    add_case(
        "slice",
        [](Rng& r) {
            const ad::Shape s{dim(r, 2, 4), dim(r, 2, 4), dim(r, 2, 4)};
            const int axis = int(dim(r, 0, 2));
            const int64_t start = dim(r, 0, s[axis] - 1);
            const int64_t len = dim(r, 1, s[axis] - start);
            return std::vector<V>{param(r, s), V::constant({3}, {double(axis), double(start), double(len)})};
        },
        [](const std::vector<V>& v) {
            const auto& a = v[1].values();
            return ad::slice(v[0], int(a[0]), int64_t(a[1]), int64_t(a[2]));
        });
    add_case(
        "reshape",
        [](Rng& r) { return std::vector<V>{param(r, {dim(r, 1, 3), 2, dim(r, 1, 3)})}; },
        [](const std::vector<V>& v) { return ad::reshape(v[0], {v[0].dim(2), v[0].dim(0) * 2}); });

    add_case(
        "attention_head",
        [](Rng& r) {
            const int64_t n = dim(r, 2, 6), hd = 2 * dim(r, 1, 3);
            return std::vector<V>{param(r, {n, hd}), param(r, {n, hd}), param(r, {n, hd})};
        },
        [](const std::vector<V>& v) {
            const int64_t hd = v[0].dim(1);
            auto q = ad::rotary_embed(v[0], hd), k = ad::rotary_embed(v[1], hd);
            auto scores = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(double(hd)));
            return ad::matmul(ad::softmax(ad::causal_mask(scores), -1), v[2]);
        });
    add_case(
        "total_loss",
        [](Rng& r) {
            const int64_t d = dim(r, 2, 6), h = dim(r, 2, 6), w = dim(r, 2, 6);
            auto moving = V::parameter({d, h, w, 1}, uniform_values(r, d * h * w, 0.0, 1.0));
            auto fixed = V::constant({d, h, w, 1}, uniform_values(r, d * h * w, 0.0, 1.0));
            return std::vector<V>{moving, fixed, off_lattice_field(r, d, h, w)};
        },
        [](const std::vector<V>& v) { return total_loss(v[0], v[1], v[2], 0.04).total; });
    return cases;
}

}  // namespace llreg
