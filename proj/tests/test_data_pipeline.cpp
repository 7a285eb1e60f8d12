#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "hye/data_pipeline.hpp"

using namespace hye;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("hye_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

RasterStack ramp_stack(std::int64_t h, std::int64_t w) {
    RasterStack s;
    std::vector<float> sar(static_cast<std::size_t>(3 * h * w)), opt(static_cast<std::size_t>(4 * h * w));
    for (std::size_t i = 0; i < sar.size(); ++i) sar[i] = -10.0f + static_cast<float>(i % 97) * 0.01f;
    for (std::size_t i = 0; i < opt.size(); ++i) opt[i] = static_cast<float>(i % 13) * 0.01f;
    s.sar = Tensor(Shape{3, h, w}, std::move(sar));
    s.optical = Tensor(Shape{4, h, w}, std::move(opt));
    s.embed = [](const TileCoord& c) { return Tensor(Shape{64}, static_cast<float>(c.y + c.x) * 1e-3f); };
    return s;
}

TilePatch sample_patch(std::int64_t h, std::int64_t w) {
    auto patches = sliding_window(ramp_stack(h, w), std::min(h, w), 1);
    return patches.front();
}

} // namespace

TEST(SlidingWindow, CountFormula) {
    EXPECT_EQ(window_grid(512, 512, 512, 256).size(), 1u);
    EXPECT_EQ(window_grid(1024, 1024, 512, 256).size(), 9u);
    for (auto [h, w, size, stride] : std::vector<std::array<std::int64_t, 4>>{
             {100, 70, 32, 16}, {64, 64, 64, 1}, {90, 130, 20, 7}, {33, 33, 8, 8}}) {
        const auto expected = ((h - size) / stride + 1) * ((w - size) / stride + 1);
        EXPECT_EQ(static_cast<std::int64_t>(window_grid(h, w, size, stride).size()), expected);
    }
}

TEST(SlidingWindow, OversizedGivesEmpty) {
    EXPECT_TRUE(sliding_window(ramp_stack(32, 32), 64, 32).empty());
    EXPECT_THROW(window_grid(32, 32, 8, 0), ConfigError);
}

TEST(SlidingWindow, DisjointAtStrideEqualSize) {
    std::vector<int> cover(64 * 64, 0);
    for (const auto& w : window_grid(64, 64, 16, 16))
        for (auto y = w.y; y < w.y + 16; ++y)
            for (auto x = w.x; x < w.x + 16; ++x) ++cover[y * 64 + x];
    for (int c : cover) EXPECT_EQ(c, 1);
}

TEST(SlidingWindow, HalfStrideCoverage) {
    std::vector<int> cover(128 * 128, 0);
    for (const auto& w : window_grid(128, 128, 32, 16))
        for (auto y = w.y; y < w.y + 32; ++y)
            for (auto x = w.x; x < w.x + 32; ++x) ++cover[y * 128 + x];
    for (int y = 16; y < 112; ++y)
        for (int x = 16; x < 112; ++x) ASSERT_EQ(cover[y * 128 + x], 4);
}

TEST(SlidingWindow, PatchContentsMatchSource) {
    const auto stack = ramp_stack(40, 48);
    const auto patches = sliding_window(stack, 16, 8);
    ASSERT_EQ(patches.size(), 4u * 5u);
    for (const auto& p : patches) {
        ASSERT_EQ(p.sar.shape(), (Shape{3, 16, 16}));
        ASSERT_EQ(p.optical.shape(), (Shape{4, 16, 16}));
        EXPECT_TRUE(p.valid);
        EXPECT_EQ(p.optical.dim(0) + p.sar.dim(0) + p.embedding.numel(), kSampleChannels);
    }
    const auto& p = patches[6]; // row 1, column 1 -> offset (8, 8)
    EXPECT_EQ(p.geo_id, "scene_r8_c8");
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x)
                ASSERT_EQ(p.sar.values()[(c * 16 + y) * 16 + x], stack.sar.values()[(c * 40 + 8 + y) * 48 + 8 + x]);
    EXPECT_FLOAT_EQ(p.embedding.values()[0], 16e-3f);
}

TEST(SlidingWindow, EmbeddingRasterMeans) {
    auto stack = ramp_stack(8, 8);
    stack.embed = nullptr;
    std::vector<float> r(64 * 8 * 8);
    for (int b = 0; b < 64; ++b)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) r[(b * 8 + y) * 8 + x] = static_cast<float>(b + (y < 4 ? 1 : -1));
    stack.embedding_raster = Tensor(Shape{64, 8, 8}, r);
    const auto p = sliding_window(stack, 8, 8);
    ASSERT_EQ(p.size(), 1u);
    for (int b = 0; b < 64; ++b) EXPECT_FLOAT_EQ(p[0].embedding.values()[b], static_cast<float>(b));
    stack.embedding_raster = Tensor();
    EXPECT_FALSE(sliding_window(stack, 8, 8)[0].valid);
}

TEST(Clean, DropsBlackSarAndBrokenEmbedding) {
    auto good = sample_patch(16, 16);
    auto black = good;
    black.sar = Tensor(good.sar.shape(), kNoData);
    auto nan = good;
    std::vector<float> e(good.embedding.values());
    e[17] = std::numeric_limits<float>::quiet_NaN();
    nan.embedding = Tensor(Shape{64}, e);
    auto missing = good;
    missing.embedding = Tensor();
    auto partial = good;
    std::vector<float> s(good.sar.values());
    for (std::size_t i = 0; i < s.size() / 100; ++i) s[i] = kNoData;
    partial.sar = Tensor(good.sar.shape(), s);
    partial.valid = false;

    const auto kept = clean({good, black, nan, missing, partial});
    ASSERT_EQ(kept.size(), 2u);
    for (const auto& k : kept) EXPECT_TRUE(k.valid);
}

TEST(Condition, IncidenceScaling) {
    const Tensor e(Shape{64}, 0.25f);
    const auto at = [&](float theta) {
        return build_condition(e, Tensor(Shape{2, 2}, theta)).values()[64 * 4];
    };
    EXPECT_FLOAT_EQ(at(29.0f), -1.0f);
    EXPECT_FLOAT_EQ(at(46.0f), 1.0f);
    EXPECT_NEAR(at(37.5f), 0.0f, 1e-6);
    EXPECT_FLOAT_EQ(at(10.0f), -1.0f);
    EXPECT_FLOAT_EQ(at(60.0f), 1.0f);
    const auto c = build_condition(e, Tensor(Shape{3, 5}, 40.0f));
    EXPECT_EQ(c.shape(), (Shape{65, 3, 5}));
    for (int k = 0; k < 64 * 15; ++k) ASSERT_EQ(c.values()[k], 0.25f);
    EXPECT_THROW(build_condition(e, Tensor(Shape{2, 2}, 30.0f), {40, 40}), ConfigError);
    EXPECT_THROW(build_condition(Tensor(Shape{63}, 0.0f), Tensor(Shape{2, 2}, 30.0f)), DimensionError);
}

TEST(Condition, FromPatchStaysInRange) {
    auto scene = generate_scene(3, 32, 1.0, ClassMix{0.2, 0.2, 0.2, 0.2, 0.2});
    scene.pixel_spacing_m = 5.0;
    Rng rng(1);
    const auto patches = sliding_window(simulate_stack(scene, BackscatterTable{}, rng, 0, "s"), 16, 16);
    for (const auto& p : patches) {
        const auto c = build_condition(p);
        for (std::int64_t i = 64 * 256; i < 65 * 256; ++i) ASSERT_TRUE(c.values()[i] >= -1.0f && c.values()[i] <= 1.0f);
    }
}

TEST(Normalize, WindowEndpointsAndRoundTrip) {
    const auto n = normalize_sar(Tensor(Shape{5}, std::vector<float>{-25.0f, 0.0f, -12.5f, -40.0f, 3.0f}));
    EXPECT_FLOAT_EQ(n.values()[0], -1.0f);
    EXPECT_FLOAT_EQ(n.values()[1], 1.0f);
    EXPECT_FLOAT_EQ(n.values()[2], 0.0f);
    EXPECT_FLOAT_EQ(n.values()[3], -1.0f);
    EXPECT_FLOAT_EQ(n.values()[4], 1.0f);
    Rng rng(4);
    std::vector<float> v(500);
    for (auto& x : v) x = static_cast<float>(-25.0 + 25.0 * rng.uniform());
    const auto back = denormalize_sar(normalize_sar(Tensor(Shape{500}, v)));
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(back.values()[i], v[i], 1e-5 * 25);
    EXPECT_THROW(normalize_sar(Tensor(Shape{1}, 0.0f), {0, 0}), ConfigError);
}

TEST(TileFile, BitExactRoundTrip) {
    const auto dir = scratch_dir("tiles");
    auto p = sample_patch(12, 12);
    p.geo_id = "abc_r0_c0";
    write_tile(p, dir / "a.hye1");
    EXPECT_FALSE(fs::exists(dir / "a.hye1.tmp"));
    const auto q = read_tile(dir / "a.hye1");
    EXPECT_EQ(q.optical.values(), p.optical.values());
    EXPECT_EQ(q.sar.values(), p.sar.values());
    EXPECT_EQ(q.embedding.values(), p.embedding.values());
    EXPECT_EQ(q.geo_id, p.geo_id);
    EXPECT_EQ(q.valid, p.valid);
}

TEST(TileFile, DistinctErrors) {
    auto bytes = encode_tile(sample_patch(8, 8));
    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x40;
    EXPECT_THROW(decode_tile(flipped), ChecksumError);
    auto v2 = bytes;
    v2[4] = 2;
    EXPECT_THROW(decode_tile(v2), VersionError);
    auto magic = bytes;
    magic[0] = 'X';
    EXPECT_THROW(decode_tile(magic), BadMagicError);
    EXPECT_THROW(decode_tile(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 3)), BadMagicError);
    EXPECT_THROW(read_tile("/nonexistent/x.hye1"), IoError);
}

TEST(Manifest, RoundTrip) {
    const auto dir = scratch_dir("manifest");
    std::vector<ManifestEntry> entries{{"a.hye1", "s_r0_c0", true, {0.5, 0.5, 0, 0, 0}},
                                       {"b.hye1", "s_r0_c8", false, {0, 0, 0, 1, 0}}};
    write_manifest(dir / "manifest.jsonl", entries);
    const auto back = read_manifest(dir / "manifest.jsonl");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[1].geo_id, "s_r0_c8");
    EXPECT_FALSE(back[1].valid);
    EXPECT_EQ(back[0].class_mix, entries[0].class_mix);
    std::ofstream(dir / "bad.jsonl") << "{\"path\": 3}\n";
    EXPECT_THROW(read_manifest(dir / "bad.jsonl"), FormatError);
}

TEST(Manifest, LoadTileDir) {
    const auto dir = scratch_dir("tiledir");
    auto p = sample_patch(8, 8);
    p.geo_id = "one";
    write_tile(p, dir / "one.hye1");
    p.geo_id = "two";
    write_tile(p, dir / "two.hye1");
    EXPECT_EQ(load_tile_dir(dir).size(), 2u);
    write_manifest(dir / "manifest.jsonl", {{"two.hye1", "two", true, {}}});
    const auto listed = load_tile_dir(dir);
    ASSERT_EQ(listed.size(), 1u);
    EXPECT_EQ(listed[0].geo_id, "two");
}

TEST(Ingest, ConstantBands) {
    const auto dir = scratch_dir("ingest_const");
    std::vector<float> r(64 * 16 * 16);
    for (int b = 0; b < 64; ++b) std::fill_n(r.begin() + b * 256, 256, 0.01f * b - 0.3f);
    write_npy(dir / "e.npy", Tensor(Shape{64, 16, 16}, r));
    const auto out = ingest_embedding_raster(dir / "e.npy", RasterFormat::npy, window_grid(16, 16, 8, 8));
    ASSERT_EQ(out.size(), 4u);
    for (const auto& e : out)
        for (int b = 0; b < 64; ++b) EXPECT_FLOAT_EQ(e.values()[b], 0.01f * b - 0.3f);
}

TEST(Ingest, KnownTileMeans) {
    // Each 8x8 tile gets a target mean per band; pixels carry +-d around it in
    // a checkerboard so the mean is exact.
    const auto dir = scratch_dir("ingest_means");
    const auto target = [](int b, int ty, int tx) { return 0.1 * b - 2.0 + 0.7 * ty - 0.3 * tx; };
    std::vector<float> r(64 * 16 * 24);
    for (int b = 0; b < 64; ++b)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 24; ++x)
                r[(b * 16 + y) * 24 + x] = static_cast<float>(target(b, y / 8, x / 8) + ((x + y) % 2 ? 0.25 : -0.25));
    const auto raw = dir / "e.raw";
    write_file_atomic(raw, r.data(), r.size() * sizeof(float));
    const auto windows = window_grid(16, 24, 8, 8);
    const auto out = ingest_embedding_raster(raw, RasterFormat::raw, windows, 16, 24);
    ASSERT_EQ(out.size(), 6u);
    for (std::size_t k = 0; k < out.size(); ++k)
        for (int b = 0; b < 64; ++b)
            EXPECT_NEAR(out[k].values()[b], target(b, int(windows[k].y / 8), int(windows[k].x / 8)), 1e-6);
}

TEST(Ingest, MissingBandNamed) {
    const auto dir = scratch_dir("ingest_missing");
    write_npy(dir / "e.npy", Tensor(Shape{63, 4, 4}, 0.0f));
    try {
        ingest_embedding_raster(dir / "e.npy", RasterFormat::npy, window_grid(4, 4, 4, 4));
        FAIL() << "expected a format error";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("band 63"), std::string::npos) << e.what();
    }
}

TEST(Ingest, NonFiniteFlaggedForClean) {
    const auto dir = scratch_dir("ingest_nan");
    std::vector<float> r(64 * 4 * 4, 1.0f);
    r[5 * 16 + 3] = std::numeric_limits<float>::infinity();
    write_npy(dir / "e.npy", Tensor(Shape{64, 4, 4}, r));
    const auto out = ingest_embedding_raster(dir / "e.npy", RasterFormat::npy, window_grid(4, 4, 4, 4));
    EXPECT_FALSE(embedding_present(out[0]));
}

TEST(Npy, Float64AndHeaderVariants) {
    // Hand-assembled version-1 header for a float64 (2, 3) array.
    std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': (2, 3), }";
    header += std::string(64 - (10 + header.size() + 1) % 64, ' ') + "\n";
    std::vector<std::uint8_t> bytes{0x93, 'N', 'U', 'M', 'P', 'Y', 1, 0};
    bytes.push_back(static_cast<std::uint8_t>(header.size() & 0xFF));
    bytes.push_back(static_cast<std::uint8_t>(header.size() >> 8));
    bytes.insert(bytes.end(), header.begin(), header.end());
    for (int i = 0; i < 6; ++i) {
        const double d = 0.5 * i - 1.0;
        const auto* p = reinterpret_cast<const std::uint8_t*>(&d);
        bytes.insert(bytes.end(), p, p + 8);
    }
    const auto t = decode_npy(bytes, "fixture");
    EXPECT_EQ(t.shape(), (Shape{2, 3}));
    EXPECT_FLOAT_EQ(t.values()[5], 1.5f);
    bytes.pop_back();
    EXPECT_THROW(decode_npy(bytes, "fixture"), TruncatedError);
    const auto one_d = decode_npy(encode_npy(Tensor(Shape{5}, 2.0f)), "x");
    EXPECT_EQ(one_d.shape(), (Shape{5}));
}
