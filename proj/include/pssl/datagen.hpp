#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "pssl/errors.hpp"
#include "pssl/tissue.hpp"

namespace pssl {

struct DataGenSpec {
    int slides = 64;
    int classes = 4;
    std::vector<int> class_pool;  // explicit texture ids; default 0..classes-1
    int slide_size = 1568;
    int tile_size = 392;
    double background_fraction = 0.2;
    double min_coverage = 0.45;
    double feature_scale = 2.0;  // keeps 5x textures resolvable at the toy 56 px context
    double ihc_fraction = 0.0;

    void validate() const;
};

/// Renders `slides` synthetic slides, tiles them, writes `tiles/*.ppm` and
/// `manifest.tsv` under out_dir. Diagnoses and magnifications cycle over the
/// five-way and four-way sets; every third slide lacks 40x.
Manifest generate_dataset(const std::filesystem::path& out_dir, const DataGenSpec& spec, std::uint64_t seed);

struct LocalizedTaskSpec {
    int samples = 600;
    int tile_size = 392;
    /// Side of the discriminative square, as a fraction of the tile. The default
    /// fills one quadrant of the central window.
    double patch_fraction = 16.0 / 56.0;
    /// Side of the central window the square is placed in (the evaluated crop).
    double window_fraction = 32.0 / 56.0;
    std::vector<int> background_classes = {1, 3};
    std::vector<int> label_classes = {0, 2};
    double feature_scale = 2.0;  // texture scale, as for 20x slides
};

/// Binary task: a background texture fills the tile and a small square of one
/// of two label textures sits in a random quadrant of the central window. The
/// tissue column holds the label texture name.
Manifest generate_localized_task(const std::filesystem::path& out_dir, const LocalizedTaskSpec& spec,
                                 std::uint64_t seed);

}  // namespace pssl
