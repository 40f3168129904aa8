#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "pssl/image.hpp"
#include "pssl/tissue.hpp"
#include "support.hpp"

using namespace pssl;

namespace {

// Floating-point HSV, multiply before divide so exact ties stay exact.
Hsv8 reference_hsv(int r, int g, int b) {
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
    Hsv8 o;
    o.v = static_cast<int>(mx);
    o.s = mx == 0 ? 0 : static_cast<int>(std::floor(255.0 * d / mx + 0.5));
    if (d == 0) return o;
    double deg;
    if (mx == r)
        deg = 60.0 * (g - b) / d;
    else if (mx == g)
        deg = 120.0 + 60.0 * (b - r) / d;
    else
        deg = 240.0 + 60.0 * (r - g) / d;
    if (deg < 0) deg += 360.0;
    int h = static_cast<int>(std::floor(deg / 2.0 + 0.5));
    if (h >= 180) h -= 180;
    o.h = h;
    return o;
}

std::vector<TileMeta> sampler_records(bool all_mags) {
    std::vector<TileMeta> recs;
    const char* diags[] = {"cancer", "precursor", "benign", "benign_neoplasm", "unknown"};
    int id = 0;
    for (const char* d : diags)
        for (int s = 0; s < 3; ++s) {
            const std::string slide = std::string(d) + std::to_string(s);
            for (int mag : kMagnifications) {
                if (!all_mags && s == 0 && mag == 40) continue;
                for (int k = 0; k < 2; ++k) {
                    TileMeta m;
                    m.path = "t" + std::to_string(id++) + ".ppm";
                    m.slide_id = slide;
                    m.magnification = mag;
                    m.diagnosis = d;
                    recs.push_back(m);
                }
            }
        }
    return recs;
}

}  // namespace

TEST_SUITE("tissue") {

TEST_CASE("hsv reference points") {
    CHECK(rgb_to_hsv8(255, 0, 0) == Hsv8{0, 255, 255});
    const Hsv8 gray = rgb_to_hsv8(128, 128, 128);
    CHECK(gray.s == 0);
    CHECK(gray.v == 128);
    CHECK(rgb_to_hsv8(230, 150, 200) == Hsv8{161, 89, 230});
}

TEST_CASE("hsv agrees with a floating-point reference") {
    Rng rng(21);
    for (int i = 0; i < 200000; ++i) {
        const int r = static_cast<int>(rng.below(256)), g = static_cast<int>(rng.below(256)),
                  b = static_cast<int>(rng.below(256));
        const Hsv8 got = rgb_to_hsv8(static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g),
                                     static_cast<std::uint8_t>(b));
        REQUIRE(got == reference_hsv(r, g, b));
    }
}

TEST_CASE("tissue coverage") {
    Image8 pink(8, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            pink.at(y, x, 0) = 230;
            pink.at(y, x, 1) = 150;
            pink.at(y, x, 2) = 200;
        }
    CHECK(tissue_coverage(pink) == 1.0);
    CHECK(tissue_coverage(Image8(8, 8, 128)) == 0.0);

    Image8 half = pink;
    for (int y = 0; y < 8; ++y)
        for (int x = 4; x < 8; ++x)
            for (int c = 0; c < 3; ++c) half.at(y, x, c) = 255;
    CHECK(tissue_coverage(half) == doctest::Approx(0.5).epsilon(1.0 / 64));

    // Monotone: turning a white pixel pink never lowers coverage.
    Image8 grow(4, 4, 255);
    double prev = tissue_coverage(grow);
    for (int i = 0; i < 16; ++i) {
        grow.at(i / 4, i % 4, 0) = 230;
        grow.at(i / 4, i % 4, 1) = 150;
        grow.at(i / 4, i % 4, 2) = 200;
        const double c = tissue_coverage(grow);
        CHECK(c >= prev);
        prev = c;
    }
}

TEST_CASE("synthetic slides") {
    SlideSpec spec;
    spec.height = spec.width = 784;
    spec.background_fraction = 0.0;
    const SlideRaster a = gen_synthetic_slide(5, spec), b = gen_synthetic_slide(5, spec);
    CHECK(a.pixels == b.pixels);
    CHECK(a.cell_labels == b.cell_labels);
    CHECK_FALSE(gen_synthetic_slide(6, spec).pixels == a.pixels);

    SlideSpec big;
    big.background_fraction = 0.0;
    big.cell_size = 98;
    const SlideRaster s = gen_synthetic_slide(1, big);
    std::set<int> labels(s.cell_labels.begin(), s.cell_labels.end());
    labels.erase(-1);
    CHECK(labels.size() == 4);

    SlideSpec empty = spec;
    empty.background_fraction = 1.0;
    CHECK(tile_grid(gen_synthetic_slide(2, empty), 392, 0.45).empty());

    SlideSpec tiny = spec;
    tiny.height = tiny.width = 100;
    CHECK_THROWS_AS(gen_synthetic_slide(1, tiny), ParameterError);
    SlideSpec one = spec;
    one.classes = 1;
    CHECK_THROWS_AS(gen_synthetic_slide(1, one), ParameterError);
}

TEST_CASE("tile grid geometry") {
    SlideSpec spec;
    spec.height = 900;
    spec.width = 800;
    const SlideRaster s = gen_synthetic_slide(3, spec);
    const auto all = tile_grid(s, 392, 0.0);
    CHECK(all.size() == 4);
    for (std::size_t i = 0; i < all.size(); ++i) {
        const CropRect& r = all[i].origin;
        CHECK(r.x % 392 == 0);
        CHECK(r.y % 392 == 0);
        CHECK(r.x + r.w <= spec.width);
        CHECK(r.y + r.h <= spec.height);
        CHECK(all[i].meta.coverage == tissue_coverage(all[i].pixels));
        for (std::size_t j = i + 1; j < all.size(); ++j) CHECK_FALSE(all[j].origin == r);
    }
    for (const auto& t : tile_grid(s, 392, 0.45)) CHECK(t.meta.coverage >= 0.45);

    SlideRaster white;
    white.pixels = Image8(784, 784, 255);
    white.slide_id = "w";
    CHECK(tile_grid(white, 392, 0.45).empty());
    CHECK(tile_grid(white, 392, 0.0).size() == 4);
    CHECK_THROWS_AS(tile_grid(white, 256, 0.0), ParameterError);
}

TEST_CASE("ppm and manifest round trip") {
    const auto dir = testing::scratch_dir("tissue");
    Image8 img(5, 7);
    Rng rng(4);
    for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.below(256));
    write_ppm(dir / "a.ppm", img);
    CHECK(read_ppm(dir / "a.ppm") == img);

    Manifest m;
    m.seed = 99;
    TileMeta t;
    t.path = "a.ppm";
    t.slide_id = "s1";
    t.coverage = 0.123456789;
    t.diagnosis = "cancer";
    m.records.push_back(t);
    write_manifest(dir / "manifest.tsv", m);
    CHECK(read_manifest(dir / "manifest.tsv") == m);

    std::filesystem::remove(dir / "a.ppm");
    CHECK_THROWS_AS(read_manifest(dir / "manifest.tsv"), DataError);
    CHECK_THROWS_AS(read_ppm(dir / "missing.ppm"), IoError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("balanced sampler frequencies") {
    const auto recs = sampler_records(true);
    BalancedSampler s(recs, SamplerTargets::defaults(), Rng(8));
    std::map<std::string, double> diag;
    std::map<int, double> mag;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const TileMeta& m = recs[s.next()];
        diag[m.diagnosis] += 1.0 / n;
        mag[m.magnification] += 1.0 / n;
    }
    for (const auto& [k, w] : SamplerTargets::defaults().diagnosis_weights) CHECK(std::abs(diag[k] - w) < 0.006);
    for (const auto& [k, w] : SamplerTargets::defaults().magnification_weights) CHECK(std::abs(mag[k] - w) < 0.006);
}

TEST_CASE("balanced sampler strata") {
    std::vector<TileMeta> one;
    TileMeta m;
    m.path = "x";
    m.slide_id = "s";
    m.diagnosis = "benign";
    one.push_back(m);
    SamplerTargets t;
    t.diagnosis_weights = {{"benign", 1.0}};
    t.magnification_weights = {{20, 1.0}};
    BalancedSampler s(one, t, Rng(1));
    for (int i = 0; i < 100; ++i) CHECK(s.next() == 0);

    // Positive weight with no tiles names the stratum.
    try {
        BalancedSampler bad(one, SamplerTargets::defaults(), Rng(1));
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        // Strata are checked in name order; the first empty one is reported.
        CHECK(std::string(e.what()).find("'benign_neoplasm'") != std::string::npos);
    }

    // Fork determinism.
    const auto recs = sampler_records(false);
    BalancedSampler a(recs, SamplerTargets::defaults(), Rng(3)), b(recs, SamplerTargets::defaults(), Rng(3));
    for (int i = 0; i < 500; ++i) CHECK(a.next() == b.next());
}

TEST_CASE("tissue flattening caps shares") {
    std::vector<TileMeta> recs;
    const std::pair<const char*, int> counts[] = {{"breast", 70}, {"skin", 10}, {"lung", 10}, {"colon", 10}};
    for (const auto& [tissue, n] : counts)
        for (int i = 0; i < n; ++i) {
            TileMeta m;
            m.tissue = tissue;
            m.slide_id = std::string(tissue) + std::to_string(i);
            recs.push_back(m);
        }
    const auto w = flattened_tissue_weights(recs);
    double total = 0;
    std::map<std::string, double> eff;
    for (const auto& [tissue, n] : counts) {
        eff[tissue] = w.at(tissue) * n / 100.0;
        total += eff[tissue];
    }
    CHECK(total == doctest::Approx(1.0));
    // The dominant tissue is capped at twice the uniform share before renormalization.
    CHECK(eff["breast"] == doctest::Approx(0.5 / 0.8));
    CHECK(eff["skin"] == doctest::Approx(0.1 / 0.8));
}

}  // TEST_SUITE
