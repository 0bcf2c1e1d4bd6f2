#include "llreg/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace llreg {

static_assert(std::endian::native == std::endian::little, "VOL1 I/O assumes a little-endian host");

std::string VolumeGeometry::str() const {
    std::ostringstream os;
    os << nx << "x" << ny << "x" << nz;
    return os.str();
}

void validate_geometry(const VolumeGeometry& g) {
    if (g.nx < 1 || g.ny < 1 || g.nz < 1)
        throw std::invalid_argument("zero dimension in geometry " + g.str());
}

namespace {

template <typename T>
void check_length(const VolumeGeometry& g, const std::vector<T>& data, int64_t channels, const char* what) {
    validate_geometry(g);
    if (static_cast<int64_t>(data.size()) != g.voxels() * channels)
        throw std::invalid_argument(std::string(what) + ": data length does not match geometry " + g.str());
}

void check_finite(const std::vector<float>& data, const char* what) {
    for (float v : data)
        if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite value");
}

}  // namespace

ScalarVolume::ScalarVolume(VolumeGeometry g, float fill) : geometry(g) {
    validate_geometry(g);
    data.assign(static_cast<std::size_t>(g.voxels()), fill);
}

ScalarVolume::ScalarVolume(VolumeGeometry g, std::vector<float> values) : geometry(g), data(std::move(values)) {
    check_length(geometry, data, 1, "ScalarVolume");
    check_finite(data, "ScalarVolume");
}

LabelVolume::LabelVolume(VolumeGeometry g, uint32_t fill) : geometry(g) {
    validate_geometry(g);
    data.assign(static_cast<std::size_t>(g.voxels()), fill);
}

LabelVolume::LabelVolume(VolumeGeometry g, std::vector<uint32_t> values) : geometry(g), data(std::move(values)) {
    check_length(geometry, data, 1, "LabelVolume");
}

DisplacementField::DisplacementField(VolumeGeometry g) : geometry(g) {
    validate_geometry(g);
    data.assign(static_cast<std::size_t>(3 * g.voxels()), 0.0f);
}

DisplacementField::DisplacementField(VolumeGeometry g, std::vector<float> values)
    : geometry(g), data(std::move(values)) {
    check_length(geometry, data, 3, "DisplacementField");
    check_finite(data, "DisplacementField");
}

std::array<float, 3> DisplacementField::at(int64_t x, int64_t y, int64_t z) const {
    const auto i = 3 * geometry.index(x, y, z);
    return {data[i], data[i + 1], data[i + 2]};
}

void DisplacementField::set(int64_t x, int64_t y, int64_t z, std::array<float, 3> u) {
    const auto i = 3 * geometry.index(x, y, z);
    data[i] = u[0];
    data[i + 1] = u[1];
    data[i + 2] = u[2];
}

float DisplacementField::max_magnitude() const {
    double best = 0.0;
    for (std::size_t i = 0; i + 2 < data.size(); i += 3) {
        const double m = std::sqrt(double(data[i]) * data[i] + double(data[i + 1]) * data[i + 1] +
                                   double(data[i + 2]) * data[i + 2]);
        best = std::max(best, m);
    }
    return static_cast<float>(best);
}

// ---------------------------------------------------------------------------
// VOL1 codec

namespace {

constexpr char kMagic[4] = {'V', 'O', 'L', '1'};
constexpr uint8_t kDtypeF32 = 0;
constexpr uint8_t kDtypeU32 = 1;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint32_t get_u32(const uint8_t* p) {
    return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}

template <typename T>
std::vector<uint8_t> encode(const VolumeGeometry& g, uint32_t channels, uint8_t dtype, const std::vector<T>& data) {
    std::vector<uint8_t> out;
    out.reserve(kVolHeaderBytes + data.size() * sizeof(T));
    out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
    put_u32(out, static_cast<uint32_t>(g.nx));
    put_u32(out, static_cast<uint32_t>(g.ny));
    put_u32(out, static_cast<uint32_t>(g.nz));
    put_u32(out, channels);
    out.push_back(dtype);
    out.insert(out.end(), 3, uint8_t{0});
    const auto* raw = reinterpret_cast<const uint8_t*>(data.data());
    out.insert(out.end(), raw, raw + data.size() * sizeof(T));
    return out;
}

}  // namespace

std::vector<uint8_t> encode_volume(const AnyVolume& v) {
    return std::visit(
        [](const auto& vol) -> std::vector<uint8_t> {
            using V = std::decay_t<decltype(vol)>;
            if constexpr (std::is_same_v<V, ScalarVolume>) {
                check_length(vol.geometry, vol.data, 1, "ScalarVolume");
                return encode(vol.geometry, 1, kDtypeF32, vol.data);
            } else if constexpr (std::is_same_v<V, LabelVolume>) {
                check_length(vol.geometry, vol.data, 1, "LabelVolume");
                return encode(vol.geometry, 1, kDtypeU32, vol.data);
            } else {
                check_length(vol.geometry, vol.data, 3, "DisplacementField");
                return encode(vol.geometry, 3, kDtypeF32, vol.data);
            }
        },
        v);
}

AnyVolume decode_volume(const std::vector<uint8_t>& bytes) {
    using K = VolumeFormatError::Kind;
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw VolumeFormatError(K::BadMagic, "bad magic: not a VOL1 file");
    if (bytes.size() < kVolHeaderBytes) throw VolumeFormatError(K::Truncated, "truncated header");

    const uint8_t* p = bytes.data();
    const VolumeGeometry g{get_u32(p + 4), get_u32(p + 8), get_u32(p + 12)};
    const uint32_t channels = get_u32(p + 16);
    const uint8_t dtype = p[20];

    if (g.nx == 0 || g.ny == 0 || g.nz == 0)
        throw VolumeFormatError(K::ZeroDimension, "zero dimension in header (" + g.str() + ")");
    if (dtype != kDtypeF32 && dtype != kDtypeU32)
        throw VolumeFormatError(K::UnknownDtype, "unknown dtype code " + std::to_string(dtype));
    if (channels != 1 && channels != 3)
        throw VolumeFormatError(K::BadChannels, "unsupported channel count " + std::to_string(channels));
    if (dtype == kDtypeU32 && channels != 1)
        throw VolumeFormatError(K::BadChannels, "label volumes must have one channel");

    const auto count = static_cast<std::size_t>(g.voxels()) * channels;
    if (bytes.size() - kVolHeaderBytes < count * 4)
        throw VolumeFormatError(K::Truncated, "truncated payload: expected " + std::to_string(count * 4) +
                                                  " bytes, found " + std::to_string(bytes.size() - kVolHeaderBytes));

    const uint8_t* payload = p + kVolHeaderBytes;
    if (dtype == kDtypeU32) {
        std::vector<uint32_t> data(count);
        std::memcpy(data.data(), payload, count * 4);
        return LabelVolume(g, std::move(data));
    }
    std::vector<float> data(count);
    std::memcpy(data.data(), payload, count * 4);
    if (channels == 3) return DisplacementField(g, std::move(data));
    return ScalarVolume(g, std::move(data));
}

AnyVolume read_volume(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw VolumeFormatError(VolumeFormatError::Kind::Io, "cannot open " + path.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_volume(bytes);
}

namespace {

template <typename V>
V read_as(const std::filesystem::path& path, const char* expected) {
    auto any = read_volume(path);
    if (auto* v = std::get_if<V>(&any)) return std::move(*v);
    throw VolumeFormatError(VolumeFormatError::Kind::DtypeMismatch,
                            "dtype mismatch: " + path.string() + " is not a " + expected);
}

}  // namespace

ScalarVolume read_scalar_volume(const std::filesystem::path& path) {
    return read_as<ScalarVolume>(path, "scalar volume");
}

LabelVolume read_label_volume(const std::filesystem::path& path) {
    return read_as<LabelVolume>(path, "label volume");
}

DisplacementField read_displacement_field(const std::filesystem::path& path) {
    return read_as<DisplacementField>(path, "displacement field");
}

void write_volume(const AnyVolume& v, const std::filesystem::path& path) {
    const auto bytes = encode_volume(v);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw VolumeFormatError(VolumeFormatError::Kind::Io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw VolumeFormatError(VolumeFormatError::Kind::Io, "write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Resampling

double resample_source_coordinate(int64_t t, int64_t n_src, int64_t n_dst) {
    // (t + 0.5) * n_src / n_dst - 0.5, kept exact for small integers.
    return double((2 * t + 1) * n_src - n_dst) / double(2 * n_dst);
}

namespace {

struct AxisTap {
    int64_t i0;
    int64_t i1;
    float frac;
};

std::vector<AxisTap> linear_taps(int64_t n_src, int64_t n_dst) {
    std::vector<AxisTap> taps(static_cast<std::size_t>(n_dst));
    for (int64_t t = 0; t < n_dst; ++t) {
        double c = std::clamp(resample_source_coordinate(t, n_src, n_dst), 0.0, double(n_src - 1));
        auto i0 = static_cast<int64_t>(std::floor(c));
        i0 = std::min(i0, n_src - 1);
        taps[t] = {i0, std::min(i0 + 1, n_src - 1), static_cast<float>(c - double(i0))};
    }
    return taps;
}

std::vector<int64_t> nearest_taps(int64_t n_src, int64_t n_dst) {
    std::vector<int64_t> taps(static_cast<std::size_t>(n_dst));
    for (int64_t t = 0; t < n_dst; ++t) {
        double c = std::clamp(resample_source_coordinate(t, n_src, n_dst), 0.0, double(n_src - 1));
        taps[t] = std::min(static_cast<int64_t>(std::floor(c + 0.5)), n_src - 1);
    }
    return taps;
}

inline float lerp(float a, float b, float f) { return a + f * (b - a); }

}  // namespace

ScalarVolume resample_volume(const ScalarVolume& v, const VolumeGeometry& target, ResampleMode mode) {
    validate_geometry(target);
    const auto& s = v.geometry;
    ScalarVolume out(target);
    if (mode == ResampleMode::Nearest) {
        const auto tx = nearest_taps(s.nx, target.nx), ty = nearest_taps(s.ny, target.ny),
                   tz = nearest_taps(s.nz, target.nz);
        for (int64_t z = 0; z < target.nz; ++z)
            for (int64_t y = 0; y < target.ny; ++y)
                for (int64_t x = 0; x < target.nx; ++x) out.at(x, y, z) = v.at(tx[x], ty[y], tz[z]);
        return out;
    }
    const auto tx = linear_taps(s.nx, target.nx), ty = linear_taps(s.ny, target.ny),
               tz = linear_taps(s.nz, target.nz);
    for (int64_t z = 0; z < target.nz; ++z) {
        const auto& cz = tz[z];
        for (int64_t y = 0; y < target.ny; ++y) {
            const auto& cy = ty[y];
            for (int64_t x = 0; x < target.nx; ++x) {
                const auto& cx = tx[x];
                const float c00 = lerp(v.at(cx.i0, cy.i0, cz.i0), v.at(cx.i1, cy.i0, cz.i0), cx.frac);
                const float c10 = lerp(v.at(cx.i0, cy.i1, cz.i0), v.at(cx.i1, cy.i1, cz.i0), cx.frac);
                const float c01 = lerp(v.at(cx.i0, cy.i0, cz.i1), v.at(cx.i1, cy.i0, cz.i1), cx.frac);
                const float c11 = lerp(v.at(cx.i0, cy.i1, cz.i1), v.at(cx.i1, cy.i1, cz.i1), cx.frac);
                out.at(x, y, z) = lerp(lerp(c00, c10, cy.frac), lerp(c01, c11, cy.frac), cz.frac);
            }
        }
    }
    return out;
}

LabelVolume resample_labels(const LabelVolume& v, const VolumeGeometry& target) {
    validate_geometry(target);
    const auto& s = v.geometry;
    const auto tx = nearest_taps(s.nx, target.nx), ty = nearest_taps(s.ny, target.ny),
               tz = nearest_taps(s.nz, target.nz);
    LabelVolume out(target);
    for (int64_t z = 0; z < target.nz; ++z)
        for (int64_t y = 0; y < target.ny; ++y)
            for (int64_t x = 0; x < target.nx; ++x) out.at(x, y, z) = v.at(tx[x], ty[y], tz[z]);
    return out;
}

}  // namespace llreg
