#include "llreg/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "llreg/evalkit.hpp"
#include "llreg/rng.hpp"
#include "llreg/warp.hpp"

namespace llreg {

void validate(const SynthConfig& cfg) {
    validate_geometry(cfg.size);
    if (!cfg.size.divisible_by(8))
        throw std::invalid_argument("size must be divisible by 8 along every axis, got " + cfg.size.str());
    if (cfg.count < 1) throw std::invalid_argument("count must be >= 1");
    const double min_dim = double(std::min({cfg.size.nx, cfg.size.ny, cfg.size.nz}));
    if (!(cfg.max_disp >= 0.0) || !(cfg.max_disp < min_dim / 4.0))
        throw std::invalid_argument("max_disp must be in [0, min(dims)/4)");
    if (!(cfg.smooth_sigma > 0.0)) throw std::invalid_argument("smooth_sigma must be > 0");
    if (cfg.n_shapes < 1) throw std::invalid_argument("n_shapes must be >= 1");
}

void gaussian_smooth(std::vector<float>& data, const VolumeGeometry& g, int channels, double sigma) {
    if (sigma <= 0.0) return;
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<size_t>(2 * r + 1));
    double total = 0.0;
    for (int i = -r; i <= r; ++i) total += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= total;

    const std::array<int64_t, 3> n{g.nx, g.ny, g.nz};
    const std::array<int64_t, 3> stride{channels, channels * g.nx, channels * g.nx * g.ny};
    std::vector<float> out(data.size());
    for (int axis = 0; axis < 3; ++axis) {
        const int64_t len = n[axis], st = stride[axis];
        const int64_t lines = g.voxels() / len;
#pragma omp parallel for schedule(static)
        for (int64_t line = 0; line < lines; ++line) {
            // Decompose the line index over the two remaining axes.
            int64_t rest = line, base = 0;
            for (int a = 0; a < 3; ++a) {
                if (a == axis) continue;
                base += (rest % n[a]) * stride[a];
                rest /= n[a];
            }
            for (int c = 0; c < channels; ++c) {
                for (int64_t i = 0; i < len; ++i) {
                    double acc = 0.0;
                    for (int t = -r; t <= r; ++t) {
                        const int64_t j = std::clamp<int64_t>(i + t, 0, len - 1);
                        acc += k[t + r] * data[base + j * st + c];
                    }
                    out[base + i * st + c] = static_cast<float>(acc);
                }
            }
        }
        data.swap(out);
    }
}

DisplacementField invert_field(const DisplacementField& u, int iterations) {
    auto uv = to_var(u);
    auto v = ad::Var<float>::zeros(uv.shape());
    ad::NoGradGuard guard;
    for (int it = 0; it < iterations; ++it) v = ad::scale(ad::gather_trilinear(uv, v), -1.0f);
    return to_field(v);
}

namespace {

struct Shape {
    bool box = false;
    double cx, cy, cz, rx, ry, rz;
    uint32_t label;
    float intensity;

    bool contains(double x, double y, double z) const {
        const double dx = (x - cx) / rx, dy = (y - cy) / ry, dz = (z - cz) / rz;
        if (box) return std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0 && std::abs(dz) <= 1.0;
        return dx * dx + dy * dy + dz * dz <= 1.0;
    }
};

// Centres sit on alternating corners of an inner cube (a tetrahedron) so the
// shapes stay large without hiding each other.
std::vector<Shape> place_shapes(const SynthConfig& cfg, Rng& rng) {
    static constexpr int kCorners[8][3] = {{0, 0, 0}, {1, 1, 0}, {1, 0, 1}, {0, 1, 1},
                                           {1, 1, 1}, {0, 0, 1}, {0, 1, 0}, {1, 0, 0}};
    const auto& g = cfg.size;
    const std::array<double, 3> n{double(g.nx), double(g.ny), double(g.nz)};
    const double m = std::min({n[0], n[1], n[2]});
    const int first = static_cast<int>(rng.uniform_int(0, 3));
    std::vector<Shape> shapes;
    for (int s = 0; s < cfg.n_shapes; ++s) {
        Shape sh;
        sh.box = cfg.n_shapes > 1 && s == cfg.n_shapes - 1;
        sh.label = static_cast<uint32_t>(s + 1);
        sh.intensity = static_cast<float>(0.45 + 0.5 * (s + 1) / cfg.n_shapes);
        const auto& corner = kCorners[(first + s) % 4 + (s / 4 % 2) * 4];
        std::array<double, 3> c{};
        for (int a = 0; a < 3; ++a) c[a] = (corner[a] ? 0.72 : 0.28) * n[a] + rng.uniform(-0.03, 0.03) * n[a];
        sh.cx = c[0], sh.cy = c[1], sh.cz = c[2];
        if (sh.box) {
            sh.rx = rng.uniform(0.25, 0.28) * m;
            sh.ry = rng.uniform(0.25, 0.28) * m;
            sh.rz = rng.uniform(0.25, 0.28) * m;
        } else {
            sh.rx = sh.ry = sh.rz = rng.uniform(0.30, 0.33) * m;
        }
        shapes.push_back(sh);
    }
    return shapes;
}

// Later shapes overwrite earlier ones.
uint32_t label_at(const std::vector<Shape>& shapes, double x, double y, double z) {
    uint32_t l = 0;
    for (const auto& s : shapes)
        if (s.contains(x, y, z)) l = s.label;
    return l;
}

// Noise is drawn on a grid padded by the kernel radius and cropped, so the
// border does not see the clamp-to-edge inflation.
DisplacementField random_field(const SynthConfig& cfg, Rng& rng) {
    const auto& g = cfg.size;
    const int64_t pad = static_cast<int64_t>(std::ceil(3.0 * cfg.smooth_sigma));
    const VolumeGeometry big{g.nx + 2 * pad, g.ny + 2 * pad, g.nz + 2 * pad};
    std::vector<float> raw(static_cast<size_t>(3 * big.voxels()));
    for (auto& v : raw) v = static_cast<float>(rng.normal());
    gaussian_smooth(raw, big, 3, cfg.smooth_sigma);
    DisplacementField f(g);
    for (int64_t z = 0; z < g.nz; ++z)
        for (int64_t y = 0; y < g.ny; ++y)
            for (int64_t x = 0; x < g.nx; ++x)
                for (int c = 0; c < 3; ++c)
                    f.data[3 * g.index(x, y, z) + c] = raw[3 * big.index(x + pad, y + pad, z + pad) + c];
    const float peak = f.max_magnitude();
    const float s = peak > 0.0f ? static_cast<float>(cfg.max_disp) / peak : 0.0f;
    for (auto& v : f.data) v *= s;
    return f;
}

}  // namespace

SynthPair gen_pair(const SynthConfig& cfg, int index) {
    validate(cfg);
    if (index < 0) throw std::invalid_argument("pair index must be >= 0");
    Rng rng(derive_seed(cfg.seed, "pair" + std::to_string(index)));
    const auto& g = cfg.size;
    const auto shapes = place_shapes(cfg, rng);

    SynthPair p;
    p.fixed_seg = LabelVolume(g);
    std::vector<float> fg(static_cast<size_t>(g.voxels()), 0.0f);
    for (int64_t z = 0; z < g.nz; ++z)
        for (int64_t y = 0; y < g.ny; ++y)
            for (int64_t x = 0; x < g.nx; ++x) {
                const uint32_t l = label_at(shapes, double(x), double(y), double(z));
                p.fixed_seg.at(x, y, z) = l;
                if (l) fg[g.index(x, y, z)] = shapes[l - 1].intensity;
            }
    gaussian_smooth(fg, g, 1, 0.7);
    std::vector<float> bg(static_cast<size_t>(g.voxels()));
    for (auto& v : bg) v = static_cast<float>(rng.normal());
    gaussian_smooth(bg, g, 1, cfg.smooth_sigma);
    const auto [lo, hi] = std::minmax_element(bg.begin(), bg.end());
    const float span = *hi - *lo;
    p.fixed = ScalarVolume(g);
    for (size_t i = 0; i < fg.size(); ++i) {
        const float b = span > 0.0f ? 0.25f * (bg[i] - *lo) / span : 0.0f;
        p.fixed.data[i] = std::clamp(fg[i] + b * (1.0f - fg[i]), 0.0f, 1.0f);
    }

    // Draw the warp, shrinking it until it and its inverse are fold-free.
    DisplacementField psi = random_field(cfg, rng), phi;
    int tries = 0;
    for (;; ++tries) {
        if (tries == 20) throw std::runtime_error("gen_pair: could not draw a fold-free field (retries exhausted)");
        phi = invert_field(psi);
        if (fold_fraction(psi) == 0.0 && fold_fraction(phi) == 0.0) break;
        for (auto& v : psi.data) v *= 0.8f;
    }

    p.moving = apply_field(p.fixed, psi);
    p.moving_seg = LabelVolume(g);
    for (int64_t z = 0; z < g.nz; ++z)
        for (int64_t y = 0; y < g.ny; ++y)
            for (int64_t x = 0; x < g.nx; ++x) {
                const auto u = psi.at(x, y, z);
                p.moving_seg.at(x, y, z) = label_at(shapes, x + u[0], y + u[1], z + u[2]);
            }
    p.gt_field = std::move(phi);
    return p;
}

namespace {

DatasetEntry entry_names(int i) {
    const std::string p = "pair" + std::to_string(i) + "_";
    return {p + "fixed.vol", p + "moving.vol", p + "fixedseg.vol", p + "movingseg.vol", p + "gtfield.vol"};
}

}  // namespace

std::vector<DatasetEntry> gen_dataset(const SynthConfig& cfg, const std::filesystem::path& dir) {
    validate(cfg);
    std::filesystem::create_directories(dir);
    std::vector<DatasetEntry> entries;
    std::ostringstream manifest;
    for (int i = 0; i < cfg.count; ++i) {
        const auto p = gen_pair(cfg, i);
        const auto e = entry_names(i);
        write_volume(p.fixed, dir / e.fixed);
        write_volume(p.moving, dir / e.moving);
        write_volume(p.fixed_seg, dir / e.fixed_seg);
        write_volume(p.moving_seg, dir / e.moving_seg);
        write_volume(p.gt_field, dir / e.gt_field);
        manifest << e.fixed << ' ' << e.moving << ' ' << e.fixed_seg << ' ' << e.moving_seg << ' ' << e.gt_field
                 << '\n';
        entries.push_back(e);
    }
    std::ofstream out(dir / kManifestName, std::ios::binary | std::ios::trunc);
    out << manifest.str();
    if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
    return entries;
}

std::vector<DatasetEntry> read_manifest(const std::filesystem::path& dir) {
    std::ifstream in(dir / kManifestName);
    if (!in) throw std::runtime_error("missing " + (dir / kManifestName).string());
    std::vector<DatasetEntry> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        DatasetEntry e;
        std::string extra;
        if (!(ls >> e.fixed >> e.moving >> e.fixed_seg >> e.moving_seg >> e.gt_field) || (ls >> extra))
            throw std::runtime_error("manifest line " + std::to_string(lineno) + ": expected five file names");
        out.push_back(e);
    }
    return out;
}

std::vector<LoadedPair> load_dataset(const std::filesystem::path& dir) {
    std::vector<LoadedPair> out;
    for (const auto& e : read_manifest(dir)) {
        LoadedPair p;
        p.fixed = read_scalar_volume(dir / e.fixed);
        p.moving = read_scalar_volume(dir / e.moving);
        p.fixed_seg = read_label_volume(dir / e.fixed_seg);
        p.moving_seg = read_label_volume(dir / e.moving_seg);
        p.gt_field = read_displacement_field(dir / e.gt_field);
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace llreg
