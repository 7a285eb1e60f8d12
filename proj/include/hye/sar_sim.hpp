#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "hye/binary_io.hpp"
#include "hye/errors.hpp"
#include "hye/rng.hpp"
#include "hye/tensor.hpp"

namespace hye {

enum class LandCover : std::uint8_t { water = 0, vegetation = 1, farmland = 2, urban = 3, bare = 4 };

inline constexpr int kNumLandCover = 5;
inline constexpr int kEmbeddingDim = 64;

inline const char* to_string(LandCover c) {
    static constexpr const char* names[] = {"water", "vegetation", "farmland", "urban", "bare"};
    return names[static_cast<int>(c)];
}

inline LandCover parse_land_cover(const std::string& name) {
    for (int i = 0; i < kNumLandCover; ++i)
        if (name == to_string(static_cast<LandCover>(i))) return static_cast<LandCover>(i);
    throw ConfigError("unknown land-cover class '" + name + "' (expected water, vegetation, farmland, urban or bare)");
}

/// Requested class fractions, indexed by LandCover.
using ClassMix = std::array<double, kNumLandCover>;

inline ClassMix class_mix_from(const std::map<std::string, double>& fractions) {
    ClassMix mix{};
    for (const auto& [name, f] : fractions) mix[static_cast<int>(parse_land_cover(name))] = f;
    return mix;
}

inline void validate_class_mix(const ClassMix& mix) {
    double sum = 0;
    for (double f : mix) {
        if (!std::isfinite(f) || f < 0) throw ConfigError("class fractions must be finite and non-negative");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-6)
        throw ConfigError("class fractions sum to " + std::to_string(sum) + ", expected 1");
}

inline double to_db(double linear) {
    if (!(linear > 0)) throw DomainError("to_db needs positive linear intensity, got " + std::to_string(linear));
    return 10.0 * std::log10(linear);
}

inline double from_db(double db) { return std::pow(10.0, db / 10.0); }

inline Tensor to_db(const Tensor& linear) {
    std::vector<float> out(linear.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(to_db(double(linear.values()[i])));
    return Tensor(linear.shape(), std::move(out));
}

inline Tensor from_db(const Tensor& db) {
    std::vector<float> out(db.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(from_db(double(db.values()[i])));
    return Tensor(db.shape(), std::move(out));
}

struct BackscatterTable {
    ClassMix mean_db{-22.0, -11.0, -9.0, -3.0, -14.0};
    double noise_floor_db = -30.0;
    double vh_offset_db = -7.0;

    double linear(LandCover c) const { return from_db(mean_db[static_cast<int>(c)]); }

    void validate() const {
        const auto at = [&](LandCover c) { return mean_db[static_cast<int>(c)]; };
        if (!(at(LandCover::water) < at(LandCover::vegetation)))
            throw ConfigError("backscatter table must keep water darker than vegetation");
        for (int i = 0; i < kNumLandCover; ++i)
            if (mean_db[i] > at(LandCover::urban))
                throw ConfigError("backscatter table must keep urban the brightest class");
        if (!(noise_floor_db < *std::min_element(mean_db.begin(), mean_db.end())))
            throw ConfigError("noise floor must lie below every class mean");
    }
};

struct SceneSpec {
    int size = 64;
    double terrain_roughness = 0.5; // 0 gives a flat DEM
    ClassMix class_mix{0.2, 0.3, 0.2, 0.15, 0.15};
    double incidence_deg = 37.0;
    int looks = 4;
    double pixel_spacing_m = 20.0;
    double relief_m = 400.0;     // elevation span at roughness 1
    double theta_min_deg = 29.0; // sensor range
    double theta_max_deg = 46.0;

    void validate() const {
        if (size < 2) throw ConfigError("scene size must be at least 2");
        if (!(terrain_roughness >= 0 && terrain_roughness <= 1)) throw ConfigError("terrain_roughness must be in [0, 1]");
        if (!(incidence_deg >= theta_min_deg && incidence_deg <= theta_max_deg))
            throw ConfigError("incidence " + std::to_string(incidence_deg) + " deg outside sensor range [" +
                              std::to_string(theta_min_deg) + ", " + std::to_string(theta_max_deg) + "]");
        if (looks < 1) throw ConfigError("looks must be at least 1");
        if (!(pixel_spacing_m > 0) || !(relief_m >= 0)) throw ConfigError("pixel spacing and relief must be positive");
        validate_class_mix(class_mix);
    }
};

struct SceneTruth {
    std::int64_t height = 0, width = 0;
    Tensor dem; // [H, W] metres
    std::vector<std::uint8_t> landcover;
    double incidence_deg = 37.0;
    int looks = 1;
    std::uint64_t seed = 0;
    double pixel_spacing_m = 20.0;

    LandCover cover(std::int64_t y, std::int64_t x) const {
        return static_cast<LandCover>(landcover[static_cast<std::size_t>(y * width + x)]);
    }
    float elevation(std::int64_t y, std::int64_t x) const { return dem.values()[static_cast<std::size_t>(y * width + x)]; }

    std::array<double, kNumLandCover> class_fractions() const {
        std::array<double, kNumLandCover> f{};
        for (auto c : landcover) f[c] += 1.0;
        for (auto& v : f) v /= static_cast<double>(landcover.size());
        return f;
    }

    void validate() const {
        if (height < 1 || width < 1 || !dem.defined() || dem.shape() != Shape{height, width} ||
            landcover.size() != static_cast<std::size_t>(height * width))
            throw DimensionError("scene rasters do not match its declared size");
        for (auto c : landcover)
            if (c >= kNumLandCover) throw DomainError("land-cover value " + std::to_string(c) + " outside the class set");
        if (looks < 1) throw DomainError("looks must be at least 1");
        if (!(pixel_spacing_m > 0)) throw DomainError("pixel spacing must be positive");
    }
};

namespace detail {

// Bilinearly interpolated lattice noise summed over octaves, rescaled to [0, 1].
inline std::vector<double> smooth_field(Rng& rng, int size, int base_cells, int octaves, double persistence) {
    const auto n = static_cast<std::size_t>(size) * static_cast<std::size_t>(size);
    std::vector<double> field(n, 0.0);
    double amplitude = 1.0;
    int cells = base_cells;
    for (int o = 0; o < octaves; ++o) {
        const int g = cells + 1;
        std::vector<double> lattice(static_cast<std::size_t>(g * g));
        for (auto& v : lattice) v = rng.uniform();
        const double scale = static_cast<double>(cells) / size;
        for (int y = 0; y < size; ++y) {
            const double fy = (y + 0.5) * scale;
            const int y0 = std::min(static_cast<int>(fy), cells - 1);
            const double ty = fy - y0;
            const double sy = ty * ty * (3 - 2 * ty);
            for (int x = 0; x < size; ++x) {
                const double fx = (x + 0.5) * scale;
                const int x0 = std::min(static_cast<int>(fx), cells - 1);
                const double tx = fx - x0;
                const double sx = tx * tx * (3 - 2 * tx);
                const double a = lattice[y0 * g + x0], b = lattice[y0 * g + x0 + 1];
                const double c = lattice[(y0 + 1) * g + x0], d = lattice[(y0 + 1) * g + x0 + 1];
                field[static_cast<std::size_t>(y) * size + x] +=
                    amplitude * ((a * (1 - sx) + b * sx) * (1 - sy) + (c * (1 - sx) + d * sx) * sy);
            }
        }
        amplitude *= persistence;
        cells *= 2;
    }
    const auto [lo, hi] = std::minmax_element(field.begin(), field.end());
    const double l = *lo, span = *hi - *lo;
    for (auto& v : field) v = span > 0 ? (v - l) / span : 0.0;
    return field;
}

} // namespace detail

/// Procedural scene: octave-noise DEM and a land-cover map obtained by
/// thresholding a smooth field at the quantiles of the requested mix, so the
/// realized fractions match the request to within one pixel. Water takes the
/// lowest field values, which track the DEM, and bare ground the highest.
inline SceneTruth generate_scene(std::uint64_t seed, const SceneSpec& spec) {
    spec.validate();
    Rng rng(seed);
    Rng dem_rng = rng.split(), cover_rng = rng.split();
    const int n = spec.size;
    const auto count = static_cast<std::size_t>(n) * static_cast<std::size_t>(n);

    const double persistence = 0.35 + 0.3 * spec.terrain_roughness;
    auto terrain = detail::smooth_field(dem_rng, n, 2, 4, persistence);
    auto blobs = detail::smooth_field(cover_rng, n, 3, 3, 0.5);

    SceneTruth s;
    s.height = s.width = n;
    s.incidence_deg = spec.incidence_deg;
    s.looks = spec.looks;
    s.seed = seed;
    s.pixel_spacing_m = spec.pixel_spacing_m;

    const double relief = spec.relief_m * spec.terrain_roughness;
    std::vector<float> dem(count);
    for (std::size_t i = 0; i < count; ++i) dem[i] = static_cast<float>(relief * terrain[i]);
    s.dem = Tensor(Shape{n, n}, std::move(dem));

    std::vector<double> key(count);
    for (std::size_t i = 0; i < count; ++i) key[i] = 0.5 * terrain[i] + 0.5 * blobs[i];
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key[a] < key[b]; });

    static constexpr LandCover band_order[] = {LandCover::water, LandCover::farmland, LandCover::urban,
                                               LandCover::vegetation, LandCover::bare};
    s.landcover.assign(count, static_cast<std::uint8_t>(LandCover::water));
    double cumulative = 0;
    std::size_t start = 0;
    for (std::size_t k = 0; k < std::size(band_order); ++k) {
        cumulative += spec.class_mix[static_cast<int>(band_order[k])];
        const std::size_t end =
            k + 1 == std::size(band_order) ? count
                                           : std::min(count, static_cast<std::size_t>(std::llround(cumulative * count)));
        for (std::size_t i = start; i < end; ++i) s.landcover[order[i]] = static_cast<std::uint8_t>(band_order[k]);
        start = std::max(start, end);
    }
    // Round-off can leave the tail assigned to a class with zero share.
    if (spec.class_mix[static_cast<int>(LandCover::bare)] == 0) {
        int last = kNumLandCover - 1;
        while (last > 0 && spec.class_mix[static_cast<int>(band_order[last])] == 0) --last;
        for (auto& c : s.landcover)
            if (c == static_cast<std::uint8_t>(LandCover::bare)) c = static_cast<std::uint8_t>(band_order[last]);
    }
    return s;
}

inline SceneTruth generate_scene(std::uint64_t seed, int size, double terrain_roughness, const ClassMix& class_mix) {
    SceneSpec spec;
    spec.size = size;
    spec.terrain_roughness = terrain_roughness;
    spec.class_mix = class_mix;
    return generate_scene(seed, spec);
}

/// Terrain slope along range (image x), dz/dx in metres per metre.
inline std::vector<double> range_slope(const SceneTruth& s) {
    std::vector<double> slope(static_cast<std::size_t>(s.height * s.width));
    for (std::int64_t y = 0; y < s.height; ++y)
        for (std::int64_t x = 0; x < s.width; ++x) {
            const auto x0 = std::max<std::int64_t>(x - 1, 0), x1 = std::min(x + 1, s.width - 1);
            const double dx = static_cast<double>(x1 - x0) * s.pixel_spacing_m;
            slope[y * s.width + x] = dx > 0 ? (s.elevation(y, x1) - s.elevation(y, x0)) / dx : 0.0;
        }
    return slope;
}

/// Local incidence in degrees. The radar sits at negative x looking toward +x,
/// so ground rising with x faces the sensor.
inline std::vector<double> local_incidence_deg(const SceneTruth& s) {
    auto theta = range_slope(s);
    for (auto& v : theta) v = s.incidence_deg - std::atan(v) * 180.0 / std::numbers::pi;
    return theta;
}

/// Radar shadow by marching each range line outward and tracking the highest
/// grazing ray seen so far.
inline std::vector<std::uint8_t> shadow_mask(const SceneTruth& s) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(s.height * s.width), 0);
    const double rise = s.pixel_spacing_m / std::tan(s.incidence_deg * std::numbers::pi / 180.0);
    for (std::int64_t y = 0; y < s.height; ++y) {
        double horizon = -std::numeric_limits<double>::infinity();
        for (std::int64_t x = 0; x < s.width; ++x) {
            const double ray = s.elevation(y, x) + static_cast<double>(x) * rise;
            if (ray < horizon) mask[y * s.width + x] = 1;
            horizon = std::max(horizon, ray);
        }
    }
    return mask;
}

struct CleanRender {
    Tensor intensity; // [H, W] linear sigma0, strictly positive
    std::vector<std::uint8_t> shadow;
    std::vector<double> local_incidence_deg;
};

/// Noise-free backscatter: class sigma0 scaled by cos(theta_loc)/cos(theta),
/// with shadowed and grazing pixels at the noise floor.
inline CleanRender render_clean(const SceneTruth& s, const BackscatterTable& table) {
    s.validate();
    CleanRender r;
    r.shadow = shadow_mask(s);
    r.local_incidence_deg = local_incidence_deg(s);
    const double floor = from_db(table.noise_floor_db);
    const double cos_theta = std::cos(s.incidence_deg * std::numbers::pi / 180.0);
    std::vector<float> out(r.shadow.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double factor = std::cos(r.local_incidence_deg[i] * std::numbers::pi / 180.0) / cos_theta;
        const double sigma = table.linear(static_cast<LandCover>(s.landcover[i])) * std::max(factor, 0.0);
        out[i] = static_cast<float>(r.shadow[i] ? floor : std::max(sigma, floor));
    }
    r.intensity = Tensor(Shape{s.height, s.width}, std::move(out));
    return r;
}

/// Fully developed multiplicative speckle: each pixel ~ Gamma(L, sigma0 / L).
inline Tensor speckle(const Tensor& clean, int looks, Rng& rng) {
    if (looks < 1) throw DomainError("looks must be at least 1, got " + std::to_string(looks));
    std::vector<float> out(clean.values().size());
    std::gamma_distribution<double> gamma(static_cast<double>(looks), 1.0 / looks);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double sigma = clean.values()[i];
        if (!(sigma > 0)) throw DomainError("speckle needs positive clean intensity, got " + std::to_string(sigma));
        const double v = sigma * gamma(rng.engine());
        out[i] = static_cast<float>(std::max(v, static_cast<double>(std::numeric_limits<float>::min())));
    }
    return Tensor(clean.shape(), std::move(out));
}

/// Speckled single-polarization intensity (linear power).
inline Tensor render_sar(const SceneTruth& s, const BackscatterTable& table, Rng& rng) {
    return speckle(render_clean(s, table).intensity, s.looks, rng);
}

/// Cross-pol analogue: the co-pol clean image shifted by a fixed offset with
/// its own speckle draw.
inline Tensor render_vh(const SceneTruth& s, const BackscatterTable& table, Rng& rng) {
    auto clean = render_clean(s, table).intensity;
    const float gain = static_cast<float>(from_db(table.vh_offset_db));
    std::vector<float> v(clean.values());
    for (auto& x : v) x *= gain;
    return speckle(Tensor(clean.shape(), std::move(v)), s.looks, rng);
}

/// Scene incidence plus the local terrain modulation, in degrees.
inline Tensor incidence_map(const SceneTruth& s) {
    const auto theta = local_incidence_deg(s);
    std::vector<float> v(theta.begin(), theta.end());
    return Tensor(Shape{s.height, s.width}, std::move(v));
}

/// Surface reflectance in B2, B3, B4, B8 per class with mild per-pixel jitter.
inline Tensor render_optical(const SceneTruth& s, Rng& rng) {
    static constexpr double reflectance[kNumLandCover][4] = {
        {0.06, 0.05, 0.03, 0.02}, // water
        {0.04, 0.07, 0.04, 0.35}, // vegetation
        {0.06, 0.09, 0.08, 0.28}, // farmland
        {0.12, 0.13, 0.14, 0.18}, // urban
        {0.15, 0.18, 0.22, 0.27}, // bare
    };
    const auto plane = static_cast<std::size_t>(s.height * s.width);
    std::vector<float> out(4 * plane);
    for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t i = 0; i < plane; ++i) {
            const double r = reflectance[s.landcover[i]][b] * (1.0 + 0.05 * rng.normal());
            out[b * plane + i] = static_cast<float>(std::clamp(r, 0.0, 1.0));
        }
    return Tensor(Shape{4, s.height, s.width}, std::move(out));
}

/// Stacked SAR source: VV dB, VH dB and incidence degrees as [3, H, W].
inline Tensor render_sar_stack(const SceneTruth& s, const BackscatterTable& table, Rng& rng) {
    const auto clean = render_clean(s, table);
    const auto vv = speckle(clean.intensity, s.looks, rng);
    const float gain = static_cast<float>(from_db(table.vh_offset_db));
    std::vector<float> vh_clean(clean.intensity.values());
    for (auto& x : vh_clean) x *= gain;
    const auto vh = speckle(Tensor(clean.intensity.shape(), std::move(vh_clean)), s.looks, rng);
    const auto plane = static_cast<std::size_t>(s.height * s.width);
    std::vector<float> out(3 * plane);
    for (std::size_t i = 0; i < plane; ++i) {
        out[i] = static_cast<float>(to_db(double(vv.values()[i])));
        out[plane + i] = static_cast<float>(to_db(double(vh.values()[i])));
        out[2 * plane + i] = static_cast<float>(clean.local_incidence_deg[i]);
    }
    return Tensor(Shape{3, s.height, s.width}, std::move(out));
}

/// Window of a scene; a non-positive extent means "to the scene edge".
struct TileCoord {
    std::int64_t y = 0, x = 0, height = 0, width = 0;
};

/// Deterministic 64-D stand-in for a geospatial embedding.
///   0-4   class fractions of the window
///   5-7   DEM mean, std and range, squashed with tanh
///   8-9   incidence: position within [29, 46] deg mapped to [-1, 1], and cos(theta)
///   10-63 tanh of a fixed Gaussian projection of the class histogram and a
///         4-scale range/azimuth roughness spectrum; the projection depends
///         only on projection_seed
inline Tensor synth_embedding(const SceneTruth& s, TileCoord tile = {}, std::uint64_t projection_seed = 0,
                              double theta_min_deg = 29.0, double theta_max_deg = 46.0) {
    s.validate();
    if (tile.height <= 0) tile.height = s.height - tile.y;
    if (tile.width <= 0) tile.width = s.width - tile.x;
    if (tile.y < 0 || tile.x < 0 || tile.height < 1 || tile.width < 1 || tile.y + tile.height > s.height ||
        tile.x + tile.width > s.width)
        throw IndexError("embedding window lies outside the scene");

    std::array<double, kNumLandCover> hist{};
    double sum = 0, sum2 = 0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
    const double n = static_cast<double>(tile.height * tile.width);
    for (std::int64_t y = tile.y; y < tile.y + tile.height; ++y)
        for (std::int64_t x = tile.x; x < tile.x + tile.width; ++x) {
            hist[static_cast<int>(s.cover(y, x))] += 1.0 / n;
            const double z = s.elevation(y, x);
            sum += z;
            sum2 += z * z;
            lo = std::min(lo, z);
            hi = std::max(hi, z);
        }
    const double mean = sum / n;
    const double sd = std::sqrt(std::max(sum2 / n - mean * mean, 0.0));

    // Mean absolute elevation difference at lags 1, 2, 4, 8 along each axis.
    std::array<double, 8> spectrum{};
    for (int k = 0; k < 4; ++k) {
        const std::int64_t lag = std::int64_t{1} << k;
        double ex = 0, ey = 0;
        std::int64_t nx = 0, ny = 0;
        for (std::int64_t y = tile.y; y < tile.y + tile.height; ++y)
            for (std::int64_t x = tile.x; x < tile.x + tile.width; ++x) {
                if (x + lag < tile.x + tile.width) ex += std::abs(s.elevation(y, x + lag) - s.elevation(y, x)), ++nx;
                if (y + lag < tile.y + tile.height) ey += std::abs(s.elevation(y + lag, x) - s.elevation(y, x)), ++ny;
            }
        spectrum[2 * k] = nx ? std::tanh(ex / nx / (10.0 * lag)) : 0.0;
        spectrum[2 * k + 1] = ny ? std::tanh(ey / ny / (10.0 * lag)) : 0.0;
    }

    std::vector<float> e(kEmbeddingDim, 0.0f);
    for (int c = 0; c < kNumLandCover; ++c) e[c] = static_cast<float>(hist[c]);
    e[5] = static_cast<float>(std::tanh(mean / 500.0));
    e[6] = static_cast<float>(std::tanh(sd / 100.0));
    e[7] = static_cast<float>(std::tanh((hi - lo) / 500.0));
    const double t = 2.0 * (s.incidence_deg - theta_min_deg) / (theta_max_deg - theta_min_deg) - 1.0;
    e[8] = static_cast<float>(std::clamp(t, -1.0, 1.0));
    e[9] = static_cast<float>(std::cos(s.incidence_deg * std::numbers::pi / 180.0));

    std::array<double, kNumLandCover + 8> features{};
    for (int c = 0; c < kNumLandCover; ++c) features[c] = 2.0 * hist[c] - 1.0;
    for (int k = 0; k < 8; ++k) features[kNumLandCover + k] = spectrum[k];
    Rng proj(projection_seed ^ 0xE3BEDDEDull);
    const double w_scale = 1.0 / std::sqrt(static_cast<double>(features.size()));
    for (int d = 10; d < kEmbeddingDim; ++d) {
        double acc = 0;
        for (double f : features) acc += proj.normal() * w_scale * f;
        e[d] = static_cast<float>(std::tanh(acc));
    }
    return Tensor(Shape{kEmbeddingDim}, std::move(e));
}

/// 8-bit grayscale export of a dB raster, linearly windowed to [lo, hi].
inline void write_pgm(const std::filesystem::path& path, const Tensor& image_db, double lo_db = -25.0,
                      double hi_db = 0.0) {
    if (image_db.ndim() != 2) throw DimensionError("write_pgm expects [H, W], got " + to_string(image_db.shape()));
    if (!(hi_db > lo_db)) throw ConfigError("write_pgm needs lo < hi");
    const auto h = image_db.dim(0), w = image_db.dim(1);
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + static_cast<std::size_t>(h * w));
    for (float v : image_db.values()) {
        const double t = std::clamp((double(v) - lo_db) / (hi_db - lo_db), 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0))));
    }
    write_file_atomic(path, out);
}

} // namespace hye
