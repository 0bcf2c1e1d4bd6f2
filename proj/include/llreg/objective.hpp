#pragma once

#include "llreg/diffops.hpp"

namespace llreg {

struct LossConfig {
    double lambda = 0.04;
    /// Adds the similarity of each intermediate stage's warp at its own resolution.
    bool deep_supervision = false;
    double deep_supervision_weight = 0.5;
};

void validate(const LossConfig& cfg);

/// mean((a - b)^2)
template <typename T>
ad::Var<T> mse(const ad::Var<T>& a, const ad::Var<T>& b);

/// Mean squared forward difference of a [nz, ny, nx, 3] field, averaged over
/// voxels, channels and the three axes.
template <typename T>
ad::Var<T> diffusion_regularizer(const ad::Var<T>& phi);

template <typename T>
struct LossTerms {
    ad::Var<T> total;
    ad::Var<T> similarity;
    ad::Var<T> regularity;
};

/// mse(moving warped by phi, fixed) + lambda * diffusion(phi).
template <typename T>
LossTerms<T> total_loss(const ad::Var<T>& moving, const ad::Var<T>& fixed, const ad::Var<T>& phi, double lambda);

}  // namespace llreg
