#pragma once

#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "hye/binary_io.hpp"
#include "hye/sar_sim.hpp"
#include "hye/tensor.hpp"

namespace hye {

inline constexpr float kNoData = -9999.0f;
inline constexpr int kOpticalChannels = 4; // B2, B3, B4, B8
inline constexpr int kSarChannels = 3;     // VV dB, VH dB, incidence deg
inline constexpr int kSampleChannels = kOpticalChannels + kSarChannels + kEmbeddingDim;
inline constexpr int kConditionChannels = kEmbeddingDim + 1;

struct TilePatch {
    Tensor optical;   // [4, H, W]
    Tensor sar;       // [3, H, W]
    Tensor embedding; // [64]
    std::string geo_id;
    bool valid = false;

    std::int64_t height() const { return sar.dim(1); }
    std::int64_t width() const { return sar.dim(2); }
};

/// True unless every dB pixel (VV and VH) carries the no-data sentinel.
inline bool sar_present(const Tensor& sar) {
    const auto plane = static_cast<std::size_t>(sar.dim(1) * sar.dim(2));
    const auto v = sar.data();
    for (std::size_t i = 0; i < 2 * plane; ++i)
        if (v[i] != kNoData) return true;
    return false;
}

inline bool embedding_present(const Tensor& e) {
    if (!e.defined() || e.numel() != kEmbeddingDim) return false;
    for (float x : e.values())
        if (!std::isfinite(x)) return false;
    return true;
}

inline bool patch_is_valid(const TilePatch& p) { return sar_present(p.sar) && embedding_present(p.embedding); }

/// Co-registered source rasters for one scene. The per-window embedding comes
/// from `embed` when set, otherwise from the band means of `embedding_raster`
/// ([64, H, W]); with neither the embedding is missing (NaN).
struct RasterStack {
    Tensor optical; // [4, H, W]
    Tensor sar;     // [3, H, W]
    Tensor embedding_raster;
    std::function<Tensor(const TileCoord&)> embed;
    std::string name = "scene";

    std::int64_t height() const { return sar.dim(1); }
    std::int64_t width() const { return sar.dim(2); }
};

inline Tensor crop(const Tensor& t, const TileCoord& w) {
    const auto c = t.dim(0), h = t.dim(1), wd = t.dim(2);
    std::vector<float> out(static_cast<std::size_t>(c * w.height * w.width));
    auto* dst = out.data();
    for (std::int64_t k = 0; k < c; ++k)
        for (std::int64_t y = 0; y < w.height; ++y) {
            const float* src = t.data().data() + (k * h + w.y + y) * wd + w.x;
            dst = std::copy(src, src + w.width, dst);
        }
    return Tensor(Shape{c, w.height, w.width}, std::move(out));
}

/// Per-band mean of a [B, H, W] raster over a window.
inline Tensor band_means(const Tensor& raster, const TileCoord& w) {
    const auto bands = raster.dim(0), h = raster.dim(1), wd = raster.dim(2);
    std::vector<float> out(static_cast<std::size_t>(bands));
    for (std::int64_t b = 0; b < bands; ++b) {
        double acc = 0;
        for (std::int64_t y = w.y; y < w.y + w.height; ++y)
            for (std::int64_t x = w.x; x < w.x + w.width; ++x) acc += raster.data()[(b * h + y) * wd + x];
        out[static_cast<std::size_t>(b)] = static_cast<float>(acc / static_cast<double>(w.height * w.width));
    }
    return Tensor(Shape{bands}, std::move(out));
}

inline std::vector<TileCoord> window_grid(std::int64_t height, std::int64_t width, std::int64_t size,
                                          std::int64_t stride) {
    if (size < 1 || stride < 1) throw ConfigError("tile size and stride must be positive");
    std::vector<TileCoord> out;
    if (size > height || size > width) return out;
    for (std::int64_t y = 0; y + size <= height; y += stride)
        for (std::int64_t x = 0; x + size <= width; x += stride) out.push_back({y, x, size, size});
    return out;
}

/// Cuts every size x size window at multiples of `stride`. Windows that would
/// cross the raster edge are skipped.
inline std::vector<TilePatch> sliding_window(const RasterStack& stack, std::int64_t size, std::int64_t stride) {
    if (stack.sar.ndim() != 3 || stack.sar.dim(0) != kSarChannels)
        throw DimensionError("SAR raster must be [3, H, W], got " + to_string(stack.sar.shape()));
    if (stack.optical.shape() != Shape{kOpticalChannels, stack.height(), stack.width()})
        throw DimensionError("optical raster must be [4, H, W] matching the SAR raster, got " +
                             to_string(stack.optical.shape()));
    if (stack.embedding_raster.defined() &&
        stack.embedding_raster.shape() != Shape{kEmbeddingDim, stack.height(), stack.width()})
        throw DimensionError("embedding raster must be [64, H, W] matching the SAR raster, got " +
                             to_string(stack.embedding_raster.shape()));
    const auto windows = window_grid(stack.height(), stack.width(), size, stride);
    if (windows.empty())
        spdlog::warn("tile size {} exceeds raster {}x{}; no windows produced", size, stack.height(), stack.width());
    std::vector<TilePatch> out;
    out.reserve(windows.size());
    for (const auto& w : windows) {
        TilePatch p;
        p.optical = crop(stack.optical, w);
        p.sar = crop(stack.sar, w);
        if (stack.embed) p.embedding = stack.embed(w);
        else if (stack.embedding_raster.defined()) p.embedding = band_means(stack.embedding_raster, w);
        else p.embedding = Tensor(Shape{kEmbeddingDim}, std::numeric_limits<float>::quiet_NaN());
        p.geo_id = stack.name + "_r" + std::to_string(w.y) + "_c" + std::to_string(w.x);
        p.valid = patch_is_valid(p);
        out.push_back(std::move(p));
    }
    return out;
}

inline std::vector<TilePatch> clean(std::vector<TilePatch> patches) {
    std::vector<TilePatch> kept;
    kept.reserve(patches.size());
    for (auto& p : patches) {
        if (!patch_is_valid(p)) continue;
        p.valid = true;
        kept.push_back(std::move(p));
    }
    return kept;
}

/// Source rasters for a simulated scene, with embeddings from the scene truth.
inline RasterStack simulate_stack(const SceneTruth& scene, const BackscatterTable& table, Rng& rng,
                                  std::uint64_t projection_seed, std::string name) {
    RasterStack s;
    s.sar = render_sar_stack(scene, table, rng);
    s.optical = render_optical(scene, rng);
    s.embed = [scene, projection_seed](const TileCoord& w) { return synth_embedding(scene, w, projection_seed); };
    s.name = std::move(name);
    return s;
}

struct IncidenceRange {
    double theta_min = 29.0, theta_max = 46.0;

    void validate() const {
        if (!(theta_min < theta_max))
            throw ConfigError("incidence range needs theta_min < theta_max, got [" + std::to_string(theta_min) + ", " +
                              std::to_string(theta_max) + "]");
    }
};

/// [65, H, W] conditioning tensor: the embedding broadcast over the tile
/// followed by the clamped incidence map scaled to [-1, 1].
inline Tensor build_condition(const Tensor& embedding, const Tensor& incidence_deg, IncidenceRange range = {}) {
    range.validate();
    if (embedding.numel() != kEmbeddingDim)
        throw DimensionError("embedding must have 64 components, got " + std::to_string(embedding.numel()));
    if (incidence_deg.ndim() != 2) throw DimensionError("incidence map must be [H, W]");
    const auto plane = static_cast<std::size_t>(incidence_deg.numel());
    std::vector<float> out(static_cast<std::size_t>(kConditionChannels) * plane);
    for (int c = 0; c < kEmbeddingDim; ++c)
        std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(c * plane), plane, embedding.values()[c]);
    const double span = range.theta_max - range.theta_min;
    for (std::size_t i = 0; i < plane; ++i) {
        const double t = std::clamp(double(incidence_deg.values()[i]), range.theta_min, range.theta_max);
        out[kEmbeddingDim * plane + i] = static_cast<float>(2.0 * (t - range.theta_min) / span - 1.0);
    }
    return Tensor(Shape{kConditionChannels, incidence_deg.dim(0), incidence_deg.dim(1)}, std::move(out));
}

inline Tensor build_condition(const TilePatch& p, IncidenceRange range = {}) {
    const auto plane = p.height() * p.width();
    std::vector<float> inc(p.sar.values().begin() + 2 * plane, p.sar.values().begin() + 3 * plane);
    return build_condition(p.embedding, Tensor(Shape{p.height(), p.width()}, std::move(inc)), range);
}

struct DbWindow {
    double low = -25.0, high = 0.0;

    void validate() const {
        if (!(low < high)) throw ConfigError("dB window needs low < high");
    }
};

inline Tensor normalize_sar(const Tensor& db, DbWindow w = {}) {
    w.validate();
    std::vector<float> out(db.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = std::clamp(double(db.values()[i]), w.low, w.high);
        out[i] = static_cast<float>(2.0 * (v - w.low) / (w.high - w.low) - 1.0);
    }
    return Tensor(db.shape(), std::move(out));
}

inline Tensor denormalize_sar(const Tensor& x, DbWindow w = {}) {
    w.validate();
    std::vector<float> out(x.values().size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<float>(w.low + (double(x.values()[i]) + 1.0) * 0.5 * (w.high - w.low));
    return Tensor(x.shape(), std::move(out));
}

/// Normalized single-channel image [1, H, W] from a patch's VV channel.
inline Tensor training_image(const TilePatch& p, DbWindow w = {}) {
    const auto plane = p.height() * p.width();
    std::vector<float> vv(p.sar.values().begin(), p.sar.values().begin() + plane);
    return normalize_sar(Tensor(Shape{1, p.height(), p.width()}, std::move(vv)), w);
}

// Tile file layout (little-endian):
//   "HYE1" | u16 version | u32 H | u32 W | u8 group count
//   per group: u16 name length | name | u32 channels | u8 spatial (1 = [C,H,W], 0 = [C])
//   u16 geo_id length | geo_id | u8 valid | f32 payload in group order | u32 CRC32
inline constexpr char kTileMagic[4] = {'H', 'Y', 'E', '1'};
inline constexpr std::uint16_t kTileVersion = 1;

inline std::vector<std::uint8_t> encode_tile(const TilePatch& p) {
    const auto h = p.height(), w = p.width();
    if (p.optical.shape() != Shape{kOpticalChannels, h, w} || p.sar.shape() != Shape{kSarChannels, h, w} ||
        p.embedding.numel() != kEmbeddingDim)
        throw DimensionError("tile channel groups must be optical [4,H,W], sar [3,H,W], embedding [64]");
    ByteWriter out;
    out.put_bytes(kTileMagic, 4);
    out.put<std::uint16_t>(kTileVersion);
    out.put<std::uint32_t>(static_cast<std::uint32_t>(h));
    out.put<std::uint32_t>(static_cast<std::uint32_t>(w));
    out.put<std::uint8_t>(3);
    const auto group = [&](const char* name, std::uint32_t channels, bool spatial) {
        out.put_string16(name);
        out.put<std::uint32_t>(channels);
        out.put<std::uint8_t>(spatial ? 1 : 0);
    };
    group("optical", kOpticalChannels, true);
    group("sar", kSarChannels, true);
    group("embedding", kEmbeddingDim, false);
    out.put_string16(p.geo_id);
    out.put<std::uint8_t>(p.valid ? 1 : 0);
    out.put_floats(p.optical.values());
    out.put_floats(p.sar.values());
    out.put_floats(p.embedding.values());
    out.seal();
    return std::move(out.bytes());
}

inline TilePatch decode_tile(const std::vector<std::uint8_t>& bytes, const std::string& what = "tile") {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kTileMagic, 4) != 0)
        throw BadMagicError(what + ": not a tile file (bad magic)");
    if (bytes.size() < 6) throw TruncatedError(what + ": header truncated");
    std::uint16_t version;
    std::memcpy(&version, bytes.data() + 4, 2);
    if (version != kTileVersion)
        throw VersionError(what + ": tile version " + std::to_string(version) + " unsupported (expected " +
                           std::to_string(kTileVersion) + ")");
    const auto body = verify_crc_trailer(bytes, what);
    ByteReader r(bytes.data() + 6, body - 6, what);
    const std::int64_t h = r.get<std::uint32_t>(), w = r.get<std::uint32_t>();
    const auto groups = r.get<std::uint8_t>();
    struct Expected {
        const char* name;
        std::uint32_t channels;
        std::uint8_t spatial;
    };
    static constexpr Expected expected[] = {
        {"optical", kOpticalChannels, 1}, {"sar", kSarChannels, 1}, {"embedding", kEmbeddingDim, 0}};
    if (groups != std::size(expected)) throw FormatError(what + ": expected 3 channel groups");
    for (const auto& e : expected) {
        const auto name = r.get_string16();
        const auto channels = r.get<std::uint32_t>();
        const auto spatial = r.get<std::uint8_t>();
        if (name != e.name || channels != e.channels || spatial != e.spatial)
            throw FormatError(what + ": unexpected channel group '" + name + "' x" + std::to_string(channels));
    }
    TilePatch p;
    p.geo_id = r.get_string16();
    p.valid = r.get<std::uint8_t>() != 0;
    const auto plane = static_cast<std::size_t>(h * w);
    p.optical = Tensor(Shape{kOpticalChannels, h, w}, r.get_floats(kOpticalChannels * plane));
    p.sar = Tensor(Shape{kSarChannels, h, w}, r.get_floats(kSarChannels * plane));
    p.embedding = Tensor(Shape{kEmbeddingDim}, r.get_floats(kEmbeddingDim));
    if (r.remaining() != 0) throw FormatError(what + ": unparsed bytes before checksum");
    return p;
}

inline void write_tile(const TilePatch& p, const std::filesystem::path& path) {
    const auto bytes = encode_tile(p);
    write_file_atomic(path, bytes.data(), bytes.size());
}

inline TilePatch read_tile(const std::filesystem::path& path) { return decode_tile(read_file(path), path.string()); }

struct ManifestEntry {
    std::string path;
    std::string geo_id;
    bool valid = false;
    std::array<double, kNumLandCover> class_mix{};
};

/// Class fractions recorded in the first five embedding components.
inline std::array<double, kNumLandCover> embedding_class_mix(const Tensor& e) {
    std::array<double, kNumLandCover> mix{};
    for (int c = 0; c < kNumLandCover; ++c) mix[c] = std::isfinite(e.values()[c]) ? e.values()[c] : 0.0;
    return mix;
}

inline std::string manifest_line(const ManifestEntry& m) {
    nlohmann::json mix = nlohmann::json::object();
    for (int c = 0; c < kNumLandCover; ++c) mix[to_string(static_cast<LandCover>(c))] = m.class_mix[c];
    return nlohmann::json{{"path", m.path}, {"geo_id", m.geo_id}, {"valid", m.valid}, {"class_mix", mix}}.dump();
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
    std::string text;
    for (const auto& e : entries) text += manifest_line(e) + "\n";
    write_file_atomic(path, text);
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
    std::vector<ManifestEntry> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            ManifestEntry e;
            e.path = j.at("path").get<std::string>();
            e.geo_id = j.at("geo_id").get<std::string>();
            e.valid = j.at("valid").get<bool>();
            if (j.contains("class_mix"))
                for (const auto& [name, f] : j.at("class_mix").items())
                    e.class_mix[static_cast<int>(parse_land_cover(name))] = f.get<double>();
            out.push_back(std::move(e));
        } catch (const nlohmann::json::exception& ex) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
        }
    }
    return out;
}

/// Loads every tile listed in `dir`/manifest.jsonl, or every *.hye1 file in
/// name order when there is no manifest.
inline std::vector<TilePatch> load_tile_dir(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw IoError("tile directory '" + dir.string() + "' does not exist");
    std::vector<fs::path> files;
    if (fs::exists(dir / "manifest.jsonl")) {
        for (const auto& e : read_manifest(dir / "manifest.jsonl")) files.push_back(dir / e.path);
    } else {
        for (const auto& e : fs::directory_iterator(dir))
            if (e.path().extension() == ".hye1") files.push_back(e.path());
        std::sort(files.begin(), files.end());
    }
    std::vector<TilePatch> out;
    out.reserve(files.size());
    for (const auto& f : files) out.push_back(read_tile(f));
    return out;
}

/// Minimal reader/writer for NumPy .npy arrays (format 1.0-3.0, C order,
/// little-endian float32 or float64).
inline std::vector<std::uint8_t> encode_npy(const Tensor& t) {
    std::string dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (";
    for (std::size_t i = 0; i < t.ndim(); ++i) dict += std::to_string(t.dim(i)) + (t.ndim() == 1 || i + 1 < t.ndim() ? ", " : "");
    dict += "), }";
    const std::size_t pre = 10;
    const std::size_t pad = (64 - (pre + dict.size() + 1) % 64) % 64;
    dict += std::string(pad, ' ') + "\n";
    ByteWriter out;
    out.put_bytes("\x93NUMPY", 6);
    out.put<std::uint8_t>(1);
    out.put<std::uint8_t>(0);
    out.put<std::uint16_t>(static_cast<std::uint16_t>(dict.size()));
    out.put_bytes(dict.data(), dict.size());
    out.put_floats(t.values());
    return std::move(out.bytes());
}

inline Tensor decode_npy(const std::vector<std::uint8_t>& bytes, const std::string& what) {
    if (bytes.size() < 10 || std::memcmp(bytes.data(), "\x93NUMPY", 6) != 0)
        throw BadMagicError(what + ": not a .npy file");
    ByteReader r(bytes.data(), bytes.size(), what);
    r.take(6);
    const auto major = r.get<std::uint8_t>();
    r.get<std::uint8_t>();
    std::size_t header_len;
    if (major == 1) header_len = r.get<std::uint16_t>();
    else if (major == 2 || major == 3) header_len = r.get<std::uint32_t>();
    else throw VersionError(what + ": unsupported .npy version " + std::to_string(major));
    const auto* h = r.take(header_len);
    const std::string header(reinterpret_cast<const char*>(h), header_len);

    std::smatch m;
    if (!std::regex_search(header, m, std::regex(R"('descr'\s*:\s*'([^']*)')")))
        throw FormatError(what + ": .npy header lacks descr");
    const std::string descr = m[1];
    if (descr != "<f4" && descr != "<f8") throw FormatError(what + ": .npy dtype " + descr + " unsupported (need <f4 or <f8)");
    if (std::regex_search(header, std::regex(R"('fortran_order'\s*:\s*True)")))
        throw FormatError(what + ": Fortran-ordered .npy arrays are unsupported");
    if (!std::regex_search(header, m, std::regex(R"('shape'\s*:\s*\(([^)]*)\))")))
        throw FormatError(what + ": .npy header lacks shape");
    Shape shape;
    const std::string dims = m[1];
    const std::regex number(R"(\d+)");
    for (std::sregex_iterator it(dims.begin(), dims.end(), number), end; it != end; ++it)
        shape.push_back(std::stoll(it->str()));
    const auto n = static_cast<std::size_t>(numel(shape));
    std::vector<float> values;
    if (descr == "<f4") {
        values = r.get_floats(n);
    } else {
        if (n > r.remaining() / 8) throw TruncatedError(what + ": truncated .npy payload");
        values.resize(n);
        const auto* p = r.take(n * 8);
        for (std::size_t i = 0; i < n; ++i) {
            double d;
            std::memcpy(&d, p + 8 * i, 8);
            values[i] = static_cast<float>(d);
        }
    }
    return Tensor(std::move(shape), std::move(values));
}

inline void write_npy(const std::filesystem::path& path, const Tensor& t) {
    const auto bytes = encode_npy(t);
    write_file_atomic(path, bytes.data(), bytes.size());
}

inline Tensor read_npy(const std::filesystem::path& path) { return decode_npy(read_file(path), path.string()); }

enum class RasterFormat { npy, raw };

inline RasterFormat parse_raster_format(const std::string& s) {
    if (s == "npy") return RasterFormat::npy;
    if (s == "raw") return RasterFormat::raw;
    throw ConfigError("unknown raster format '" + s + "' (expected npy or raw)");
}

/// Loads a band-first embedding raster [B, H, W]. Raw files are headerless
/// little-endian float32 planes; their height and width must be supplied.
inline Tensor load_embedding_raster(const std::filesystem::path& path, RasterFormat format,
                                    std::int64_t raw_height = 0, std::int64_t raw_width = 0) {
    Tensor raster;
    if (format == RasterFormat::npy) {
        raster = read_npy(path);
        if (raster.ndim() != 3) throw FormatError(path.string() + ": embedding raster must be [bands, H, W]");
    } else {
        if (raw_height < 1 || raw_width < 1) throw ConfigError("raw rasters need an explicit height and width");
        const auto bytes = read_file(path);
        const auto plane = static_cast<std::size_t>(raw_height * raw_width) * sizeof(float);
        if (bytes.size() % plane != 0)
            throw FormatError(path.string() + ": raw raster size is not a whole number of bands");
        const auto bands = static_cast<std::int64_t>(bytes.size() / plane);
        ByteReader r(bytes.data(), bytes.size(), path.string());
        raster = Tensor(Shape{bands, raw_height, raw_width}, r.get_floats(bytes.size() / sizeof(float)));
    }
    if (raster.dim(0) < kEmbeddingDim)
        throw FormatError(path.string() + ": embedding raster has " + std::to_string(raster.dim(0)) +
                          " bands; band " + std::to_string(raster.dim(0)) + " is missing (need 64)");
    if (raster.dim(0) > kEmbeddingDim)
        throw FormatError(path.string() + ": embedding raster has " + std::to_string(raster.dim(0)) +
                          " bands, expected 64");
    return raster;
}

/// Per-window band means. Non-finite means are passed through so clean()
/// drops the affected tiles.
inline std::vector<Tensor> ingest_embedding_raster(const std::filesystem::path& path, RasterFormat format,
                                                   const std::vector<TileCoord>& windows, std::int64_t raw_height = 0,
                                                   std::int64_t raw_width = 0) {
    const auto raster = load_embedding_raster(path, format, raw_height, raw_width);
    std::vector<Tensor> out;
    out.reserve(windows.size());
    for (const auto& w : windows) {
        if (w.y < 0 || w.x < 0 || w.y + w.height > raster.dim(1) || w.x + w.width > raster.dim(2))
            throw IndexError("tile window lies outside the embedding raster");
        out.push_back(band_means(raster, w));
    }
    return out;
}

} // namespace hye
