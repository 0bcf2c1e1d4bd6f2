#include "llreg/objective.hpp"

#include <cmath>

#include "llreg/warp.hpp"

namespace llreg {

void validate(const LossConfig& cfg) {
    if (!(cfg.lambda >= 0.0) || !std::isfinite(cfg.lambda)) throw std::invalid_argument("lambda must be >= 0");
    if (!(cfg.deep_supervision_weight >= 0.0)) throw std::invalid_argument("deep_supervision_weight must be >= 0");
}

template <typename T>
ad::Var<T> mse(const ad::Var<T>& a, const ad::Var<T>& b) {
    if (a.shape() != b.shape())
        throw ad::ShapeError("mse: shape mismatch " + ad::shape_str(a.shape()) + " vs " + ad::shape_str(b.shape()));
    return ad::mean(ad::square(ad::sub(a, b)));
}

template <typename T>
ad::Var<T> diffusion_regularizer(const ad::Var<T>& phi) {
    if (phi.rank() != 4 || phi.dim(3) != 3)
        throw ad::ShapeError("diffusion_regularizer: expected [nz,ny,nx,3], got " + ad::shape_str(phi.shape()));
    for (int axis = 0; axis < 3; ++axis)
        if (phi.dim(axis) < 2) throw ad::ShapeError("diffusion_regularizer: dims too small " + ad::shape_str(phi.shape()));
    ad::Var<T> acc;
    for (int axis = 0; axis < 3; ++axis) {
        const int64_t n = phi.dim(axis);
        auto diff = ad::sub(ad::slice(phi, axis, 1, n - 1), ad::slice(phi, axis, 0, n - 1));
        auto term = ad::mean(ad::square(diff));
        acc = acc.defined() ? ad::add(acc, term) : term;
    }
    return ad::scale(acc, T(1) / T(3));
}

template <typename T>
LossTerms<T> total_loss(const ad::Var<T>& moving, const ad::Var<T>& fixed, const ad::Var<T>& phi, double lambda) {
    auto sim = mse(warp(moving, phi), fixed);
    auto reg = diffusion_regularizer(phi);
    auto total = ad::add(sim, ad::scale(reg, static_cast<T>(lambda)));
    return {total, sim, reg};
}

template ad::Var<float> mse(const ad::Var<float>&, const ad::Var<float>&);
template ad::Var<double> mse(const ad::Var<double>&, const ad::Var<double>&);
template ad::Var<float> diffusion_regularizer(const ad::Var<float>&);
template ad::Var<double> diffusion_regularizer(const ad::Var<double>&);
template LossTerms<float> total_loss(const ad::Var<float>&, const ad::Var<float>&, const ad::Var<float>&, double);
template LossTerms<double> total_loss(const ad::Var<double>&, const ad::Var<double>&, const ad::Var<double>&, double);

}  // namespace llreg
