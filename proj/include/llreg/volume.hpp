#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace llreg {

/// Voxel grid extents. Spacing is implicitly one voxel along every axis.
struct VolumeGeometry {
    int64_t nx = 1;
    int64_t ny = 1;
    int64_t nz = 1;

    int64_t voxels() const { return nx * ny * nz; }
    /// Linear index with x fastest, z slowest.
    int64_t index(int64_t x, int64_t y, int64_t z) const { return x + nx * (y + ny * z); }
    bool divisible_by(int64_t f) const { return nx % f == 0 && ny % f == 0 && nz % f == 0; }
    VolumeGeometry scaled_down(int64_t f) const { return {nx / f, ny / f, nz / f}; }
    VolumeGeometry scaled_up(int64_t f) const { return {nx * f, ny * f, nz * f}; }
    std::string str() const;

    friend bool operator==(const VolumeGeometry&, const VolumeGeometry&) = default;
};

/// Throws std::invalid_argument unless every extent is >= 1.
void validate_geometry(const VolumeGeometry& g);

struct ScalarVolume {
    VolumeGeometry geometry;
    std::vector<float> data;

    ScalarVolume() = default;
    explicit ScalarVolume(VolumeGeometry g, float fill = 0.0f);
    ScalarVolume(VolumeGeometry g, std::vector<float> values);

    float& at(int64_t x, int64_t y, int64_t z) { return data[geometry.index(x, y, z)]; }
    float at(int64_t x, int64_t y, int64_t z) const { return data[geometry.index(x, y, z)]; }

    friend bool operator==(const ScalarVolume&, const ScalarVolume&) = default;
};

/// Integer segmentation map; label 0 is background.
struct LabelVolume {
    VolumeGeometry geometry;
    std::vector<uint32_t> data;

    LabelVolume() = default;
    explicit LabelVolume(VolumeGeometry g, uint32_t fill = 0);
    LabelVolume(VolumeGeometry g, std::vector<uint32_t> values);

    uint32_t& at(int64_t x, int64_t y, int64_t z) { return data[geometry.index(x, y, z)]; }
    uint32_t at(int64_t x, int64_t y, int64_t z) const { return data[geometry.index(x, y, z)]; }

    friend bool operator==(const LabelVolume&, const LabelVolume&) = default;
};

/// Per-voxel displacement (ux, uy, uz) in voxel units, interleaved per voxel.
struct DisplacementField {
    VolumeGeometry geometry;
    std::vector<float> data;

    DisplacementField() = default;
    explicit DisplacementField(VolumeGeometry g);
    DisplacementField(VolumeGeometry g, std::vector<float> values);

    std::array<float, 3> at(int64_t x, int64_t y, int64_t z) const;
    void set(int64_t x, int64_t y, int64_t z, std::array<float, 3> u);
    /// Largest Euclidean displacement over all voxels.
    float max_magnitude() const;

    friend bool operator==(const DisplacementField&, const DisplacementField&) = default;
};

using AnyVolume = std::variant<ScalarVolume, LabelVolume, DisplacementField>;

/// Failure while decoding or encoding a VOL1 file.
class VolumeFormatError : public std::runtime_error {
public:
    enum class Kind { BadMagic, Truncated, ZeroDimension, UnknownDtype, BadChannels, DtypeMismatch, Io };

    VolumeFormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

inline constexpr std::size_t kVolHeaderBytes = 24;

// VOL1 layout: "VOL1", u32 nx, ny, nz, u32 channels, u8 dtype (0 f32, 1 u32),
// three zero bytes, then the little-endian payload, channel-interleaved.
std::vector<uint8_t> encode_volume(const AnyVolume& v);
AnyVolume decode_volume(const std::vector<uint8_t>& bytes);

AnyVolume read_volume(const std::filesystem::path& path);
ScalarVolume read_scalar_volume(const std::filesystem::path& path);
LabelVolume read_label_volume(const std::filesystem::path& path);
DisplacementField read_displacement_field(const std::filesystem::path& path);

void write_volume(const AnyVolume& v, const std::filesystem::path& path);

enum class ResampleMode { Trilinear, Nearest };

/// Samples `v` on `target` using voxel-centre alignment:
/// source = (t + 0.5) * n_src / n_dst - 0.5, clamped into [0, n_src - 1].
ScalarVolume resample_volume(const ScalarVolume& v, const VolumeGeometry& target,
                             ResampleMode mode = ResampleMode::Trilinear);
LabelVolume resample_labels(const LabelVolume& v, const VolumeGeometry& target);

/// Source coordinate for target index `t` under the voxel-centre convention, unclamped.
double resample_source_coordinate(int64_t t, int64_t n_src, int64_t n_dst);

}  // namespace llreg
