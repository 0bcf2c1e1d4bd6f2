#pragma once

#include "llreg/diffops.hpp"
#include "llreg/volume.hpp"

namespace llreg {

// Conversions between grid types and channel-last tensors [nz, ny, nx, C].
ad::Var<float> to_var(const ScalarVolume& v);
ad::Var<float> to_var(const DisplacementField& phi);
ScalarVolume to_scalar_volume(const ad::Var<float>& v);
DisplacementField to_field(const ad::Var<float>& v);
VolumeGeometry geometry_of(const ad::Shape& shape);

/// output(x) = v(x + u(x)) with trilinear interpolation, clamp-to-edge.
template <typename T>
ad::Var<T> warp(const ad::Var<T>& v, const ad::Var<T>& phi);

/// Field whose warp equals warping by `first`, then by `second`:
/// u(x) = u_second(x) + u_first(x + u_second(x)).
template <typename T>
ad::Var<T> compose(const ad::Var<T>& first, const ad::Var<T>& second);

/// Doubles the grid and the displacement values.
template <typename T>
ad::Var<T> upscale_field(const ad::Var<T>& phi);

/// Halves the grid and the displacement values.
template <typename T>
ad::Var<T> downscale_field(const ad::Var<T>& phi);

ScalarVolume apply_field(const ScalarVolume& v, const DisplacementField& phi);
LabelVolume warp_labels(const LabelVolume& labels, const DisplacementField& phi);
DisplacementField compose(const DisplacementField& first, const DisplacementField& second);
DisplacementField upscale_field(const DisplacementField& phi, int factor = 2);
DisplacementField downscale_field(const DisplacementField& phi, int factor = 2);

/// det(I + grad u) per voxel; central differences inside, one-sided on faces.
ScalarVolume jacobian_det(const DisplacementField& phi);

}  // namespace llreg
