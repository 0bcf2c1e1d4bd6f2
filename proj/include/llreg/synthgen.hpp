#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "llreg/volume.hpp"

namespace llreg {

struct SynthConfig {
    VolumeGeometry size{32, 32, 32};
    int count = 16;
    uint64_t seed = 7;
    double max_disp = 4.0;
    double smooth_sigma = 4.0;
    /// Spheres first, the last shape is a box. Labels run 1..n_shapes.
    int n_shapes = 4;
};

void validate(const SynthConfig& cfg);

struct SynthPair {
    ScalarVolume fixed;
    LabelVolume fixed_seg;
    ScalarVolume moving;
    LabelVolume moving_seg;
    /// Registers moving onto fixed: moving(x + u(x)) ~ fixed(x).
    DisplacementField gt_field;
};

/// Separable Gaussian blur of every channel (interleaved), kernel truncated at 3 sigma,
/// clamp-to-edge boundary. sigma <= 0 leaves the data unchanged.
void gaussian_smooth(std::vector<float>& data, const VolumeGeometry& g, int channels, double sigma);

/// Field v with v(x) = -u(x + v(x)), found by fixed-point iteration.
DisplacementField invert_field(const DisplacementField& u, int iterations = 40);

SynthPair gen_pair(const SynthConfig& cfg, int index);

struct DatasetEntry {
    std::string fixed, moving, fixed_seg, moving_seg, gt_field;
};

inline constexpr const char* kManifestName = "manifest.txt";

/// Writes pair{i}_{fixed|moving|fixedseg|movingseg|gtfield}.vol and manifest.txt.
std::vector<DatasetEntry> gen_dataset(const SynthConfig& cfg, const std::filesystem::path& dir);

std::vector<DatasetEntry> read_manifest(const std::filesystem::path& dir);

struct LoadedPair {
    ScalarVolume fixed, moving;
    LabelVolume fixed_seg, moving_seg;
    DisplacementField gt_field;
};

std::vector<LoadedPair> load_dataset(const std::filesystem::path& dir);

}  // namespace llreg
