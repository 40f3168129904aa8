#include "pssl/datagen.hpp"

#include <cmath>
#include <cstdio>

namespace pssl {

void DataGenSpec::validate() const {
    if (slides < 1) throw ConfigError("slides must be >= 1");
    if (classes < 2 && class_pool.size() < 2) throw ConfigError("at least two texture classes are required");
    if (tile_size != 224 && tile_size != 392) throw ConfigError("tile size must be 224 or 392");
    if (slide_size < tile_size) throw ConfigError("slide smaller than one tile");
    if (!(ihc_fraction >= 0 && ihc_fraction <= 1)) throw ConfigError("ihc_fraction must lie in [0, 1]");
    if (!(feature_scale > 0)) throw ConfigError("feature_scale must be positive");
}

Manifest generate_dataset(const std::filesystem::path& out_dir, const DataGenSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::filesystem::create_directories(out_dir / "tiles");
    Manifest m;
    m.seed = seed;
    Rng rng(seed);
    for (int i = 0; i < spec.slides; ++i) {
        SlideSpec s;
        s.height = s.width = spec.slide_size;
        s.classes = spec.classes;
        s.class_pool = spec.class_pool;
        s.background_fraction = spec.background_fraction;
        s.cell_size = spec.tile_size;
        s.feature_scale = spec.feature_scale;
        s.diagnosis = kDiagnoses[i % kDiagnoses.size()];
        const bool lacks40 = i % 3 == 2;
        s.available_magnifications = lacks40 ? std::vector<int>{20, 10, 5} : std::vector<int>{40, 20, 10, 5};
        s.magnification = s.available_magnifications[(i / 5) % s.available_magnifications.size()];
        s.stain = rng.fork(static_cast<std::uint64_t>(i)).bernoulli(spec.ihc_fraction) ? Stain::ihc : Stain::he;
        char id[64];
        std::snprintf(id, sizeof(id), "s%llu_%04d", static_cast<unsigned long long>(seed), i);
        s.slide_id = id;
        std::snprintf(id, sizeof(id), "p%llu_%04d", static_cast<unsigned long long>(seed), i / 2);
        s.patient_id = id;
        const SlideRaster raster = gen_synthetic_slide(mix64(seed ^ mix64(static_cast<std::uint64_t>(i) + 1)), s);
        for (TileRecord& t : tile_grid(raster, spec.tile_size, spec.min_coverage)) {
            char name[128];
            std::snprintf(name, sizeof(name), "tiles/%s_%d_%d.ppm", s.slide_id.c_str(), t.origin.y / spec.tile_size,
                          t.origin.x / spec.tile_size);
            t.meta.path = name;
            write_ppm(out_dir / name, t.pixels);
            m.records.push_back(t.meta);
        }
    }
    write_manifest(out_dir / "manifest.tsv", m);
    return m;
}

Manifest generate_localized_task(const std::filesystem::path& out_dir, const LocalizedTaskSpec& spec,
                                 std::uint64_t seed) {
    if (spec.samples < 2) throw ConfigError("localized task needs at least two samples");
    if (spec.background_classes.empty() || spec.label_classes.size() < 2)
        throw ConfigError("localized task needs background classes and two label classes");
    std::filesystem::create_directories(out_dir / "tiles");
    Manifest m;
    m.seed = seed;
    Rng rng(seed);
    const int n = spec.tile_size;
    const int window = static_cast<int>(std::lround(spec.window_fraction * n));
    const int side = static_cast<int>(std::lround(spec.patch_fraction * n));
    const int w0 = (n - window) / 2;
    const int half = window / 2;
    for (int i = 0; i < spec.samples; ++i) {
        const int label = i % static_cast<int>(spec.label_classes.size());
        const int bg = spec.background_classes[rng.below(spec.background_classes.size())];
        const int quadrant = static_cast<int>(rng.below(4));
        Image8 img(n, n);
        const std::uint64_t tseed = rng.next_u64();
        render_texture(img, 0, 0, n, n, bg, Stain::he, spec.feature_scale, tseed);
        const int qx = w0 + (quadrant % 2) * half, qy = w0 + (quadrant / 2) * half;
        const int x0 = qx + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, half - side + 1))));
        const int y0 = qy + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, half - side + 1))));
        render_texture(img, x0, y0, side, side, spec.label_classes[label], Stain::he, spec.feature_scale,
                       rng.next_u64());
        TileMeta meta;
        char name[96];
        std::snprintf(name, sizeof(name), "tiles/loc%llu_%05d.ppm", static_cast<unsigned long long>(seed), i);
        meta.path = name;
        std::snprintf(name, sizeof(name), "loc%llu_%05d", static_cast<unsigned long long>(seed), i);
        meta.slide_id = name;
        meta.stain = to_string(Stain::he);
        meta.tissue = texture_class_name(spec.label_classes[label]);
        meta.coverage = tissue_coverage(img);
        write_ppm(out_dir / meta.path, img);
        m.records.push_back(meta);
    }
    write_manifest(out_dir / "manifest.tsv", m);
    return m;
}

}  // namespace pssl
