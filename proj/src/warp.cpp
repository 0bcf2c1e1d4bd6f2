#include "llreg/warp.hpp"

#include <algorithm>
#include <cmath>

namespace llreg {

namespace {

void require_same(const VolumeGeometry& a, const VolumeGeometry& b, const char* op) {
    if (!(a == b))
        throw std::invalid_argument(std::string(op) + ": geometry mismatch " + a.str() + " vs " + b.str());
}

bool is_power_of_two(int f) { return f >= 1 && (f & (f - 1)) == 0; }

}  // namespace

VolumeGeometry geometry_of(const ad::Shape& shape) {
    if (shape.size() != 4) throw ad::ShapeError("expected a [nz, ny, nx, C] tensor, got " + ad::shape_str(shape));
    return {shape[2], shape[1], shape[0]};
}

ad::Var<float> to_var(const ScalarVolume& v) {
    const auto& g = v.geometry;
    return ad::Var<float>::constant({g.nz, g.ny, g.nx, 1}, v.data);
}

ad::Var<float> to_var(const DisplacementField& phi) {
    const auto& g = phi.geometry;
    return ad::Var<float>::constant({g.nz, g.ny, g.nx, 3}, phi.data);
}

ScalarVolume to_scalar_volume(const ad::Var<float>& v) {
    if (v.rank() != 4 || v.dim(3) != 1) throw ad::ShapeError("not a scalar volume tensor: " + ad::shape_str(v.shape()));
    return ScalarVolume(geometry_of(v.shape()), v.values());
}

DisplacementField to_field(const ad::Var<float>& v) {
    if (v.rank() != 4 || v.dim(3) != 3) throw ad::ShapeError("not a field tensor: " + ad::shape_str(v.shape()));
    return DisplacementField(geometry_of(v.shape()), v.values());
}

template <typename T>
ad::Var<T> warp(const ad::Var<T>& v, const ad::Var<T>& phi) {
    return ad::gather_trilinear(v, phi);
}

template <typename T>
ad::Var<T> compose(const ad::Var<T>& first, const ad::Var<T>& second) {
    if (first.shape() != second.shape())
        throw ad::ShapeError("compose: geometry mismatch " + ad::shape_str(first.shape()) + " vs " +
                             ad::shape_str(second.shape()));
    return ad::add(second, ad::gather_trilinear(first, second));
}

template <typename T>
ad::Var<T> upscale_field(const ad::Var<T>& phi) {
    return ad::scale(ad::resample_trilinear(phi, 2 * phi.dim(0), 2 * phi.dim(1), 2 * phi.dim(2)), T(2));
}

template <typename T>
ad::Var<T> downscale_field(const ad::Var<T>& phi) {
    if (phi.dim(0) % 2 || phi.dim(1) % 2 || phi.dim(2) % 2)
        throw ad::ShapeError("downscale_field: odd grid " + ad::shape_str(phi.shape()));
    return ad::scale(ad::resample_trilinear(phi, phi.dim(0) / 2, phi.dim(1) / 2, phi.dim(2) / 2), T(0.5));
}

template ad::Var<float> warp(const ad::Var<float>&, const ad::Var<float>&);
template ad::Var<double> warp(const ad::Var<double>&, const ad::Var<double>&);
template ad::Var<float> compose(const ad::Var<float>&, const ad::Var<float>&);
template ad::Var<double> compose(const ad::Var<double>&, const ad::Var<double>&);
template ad::Var<float> upscale_field(const ad::Var<float>&);
template ad::Var<double> upscale_field(const ad::Var<double>&);
template ad::Var<float> downscale_field(const ad::Var<float>&);
template ad::Var<double> downscale_field(const ad::Var<double>&);

ScalarVolume apply_field(const ScalarVolume& v, const DisplacementField& phi) {
    require_same(v.geometry, phi.geometry, "apply_field");
    ad::NoGradGuard guard;
    return to_scalar_volume(warp(to_var(v), to_var(phi)));
}

LabelVolume warp_labels(const LabelVolume& labels, const DisplacementField& phi) {
    require_same(labels.geometry, phi.geometry, "warp_labels");
    const auto& g = labels.geometry;
    LabelVolume out(g);
    auto nearest = [](double c, int64_t n) {
        c = std::clamp(c, 0.0, double(n - 1));
        return std::min(static_cast<int64_t>(std::floor(c + 0.5)), n - 1);
    };
    for (int64_t z = 0; z < g.nz; ++z)
        for (int64_t y = 0; y < g.ny; ++y)
            for (int64_t x = 0; x < g.nx; ++x) {
                const auto u = phi.at(x, y, z);
                out.at(x, y, z) = labels.at(nearest(double(x) + u[0], g.nx), nearest(double(y) + u[1], g.ny),
                                            nearest(double(z) + u[2], g.nz));
            }
    return out;
}

DisplacementField compose(const DisplacementField& first, const DisplacementField& second) {
    require_same(first.geometry, second.geometry, "compose");
    ad::NoGradGuard guard;
    return to_field(compose(to_var(first), to_var(second)));
}

DisplacementField upscale_field(const DisplacementField& phi, int factor) {
    if (!is_power_of_two(factor)) throw std::invalid_argument("upscale_field: factor must be a power of two");
    ad::NoGradGuard guard;
    auto v = to_var(phi);
    for (int f = factor; f > 1; f /= 2) v = upscale_field(v);
    return to_field(v);
}

DisplacementField downscale_field(const DisplacementField& phi, int factor) {
    if (!is_power_of_two(factor)) throw std::invalid_argument("downscale_field: factor must be a power of two");
    ad::NoGradGuard guard;
    auto v = to_var(phi);
    for (int f = factor; f > 1; f /= 2) v = downscale_field(v);
    return to_field(v);
}

ScalarVolume jacobian_det(const DisplacementField& phi) {
    const auto& g = phi.geometry;
    if (g.nx < 3 || g.ny < 3 || g.nz < 3)
        throw std::invalid_argument("jacobian_det: dims too small (" + g.str() + "), need >= 3 per axis");
    ScalarVolume out(g);
    const int64_t n[3] = {g.nx, g.ny, g.nz};
    auto component = [&](int64_t x, int64_t y, int64_t z, int c) { return double(phi.data[3 * g.index(x, y, z) + c]); };
    for (int64_t z = 0; z < g.nz; ++z)
        for (int64_t y = 0; y < g.ny; ++y)
            for (int64_t x = 0; x < g.nx; ++x) {
                const int64_t p[3] = {x, y, z};
                double J[3][3];
                for (int axis = 0; axis < 3; ++axis) {
                    int64_t lo[3] = {x, y, z}, hi[3] = {x, y, z};
                    double h;
                    if (p[axis] == 0) {
                        hi[axis] = 1;
                        h = 1.0;
                    } else if (p[axis] == n[axis] - 1) {
                        lo[axis] = n[axis] - 2;
                        h = 1.0;
                    } else {
                        lo[axis] -= 1;
                        hi[axis] += 1;
                        h = 2.0;
                    }
                    for (int c = 0; c < 3; ++c) {
                        const double d = (component(hi[0], hi[1], hi[2], c) - component(lo[0], lo[1], lo[2], c)) / h;
                        J[c][axis] = d + (c == axis ? 1.0 : 0.0);
                    }
                }
                const double det = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                                   J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                                   J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
                out.at(x, y, z) = static_cast<float>(det);
            }
    return out;
}

}  // namespace llreg
