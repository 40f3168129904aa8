#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pssl/image.hpp"
#include "pssl/rng.hpp"

namespace pssl {

enum class Stain { he, ihc };
enum class Diagnosis { cancer, precursor, benign, benign_neoplasm, unknown };

inline constexpr std::array<Diagnosis, 5> kDiagnoses = {Diagnosis::cancer, Diagnosis::precursor, Diagnosis::benign,
                                                        Diagnosis::benign_neoplasm, Diagnosis::unknown};
inline constexpr std::array<int, 4> kMagnifications = {40, 20, 10, 5};

std::string to_string(Stain s);
std::string to_string(Diagnosis d);
Stain parse_stain(const std::string& s);
Diagnosis parse_diagnosis(const std::string& s);

// ---------------------------------------------------------------------------
// HSV tissue filter

struct Hsv8 {
    int h = 0;  // half-degrees, [0, 180)
    int s = 0;  // [0, 255]
    int v = 0;  // [0, 255]
    bool operator==(const Hsv8&) const = default;
};

/// Exact integer HSV; each channel rounded half-up to the nearest integer.
Hsv8 rgb_to_hsv8(std::uint8_t r, std::uint8_t g, std::uint8_t b);

/// Inclusive acceptance intervals.
struct HsvRanges {
    int h_lo = 90, h_hi = 180;
    int s_lo = 8, s_hi = 255;
    int v_lo = 103, v_hi = 255;

    bool contains(const Hsv8& p) const {
        return p.h >= h_lo && p.h <= h_hi && p.s >= s_lo && p.s <= s_hi && p.v >= v_lo && p.v <= v_hi;
    }
};

double tissue_coverage(const Image8& tile, const HsvRanges& ranges = {});

// ---------------------------------------------------------------------------
// Synthetic slides

struct SlideSpec {
    int height = 1568;
    int width = 1568;
    int classes = 4;                  // texture classes to draw from
    std::vector<int> class_pool;      // optional explicit class ids; default 0..classes-1
    double background_fraction = 0.2; // fraction of cells left blank
    int cell_size = 392;              // label-map resolution
    int magnification = 20;           // texture scale follows sqrt(magnification / 20)
    double feature_scale = 1.0;
    Stain stain = Stain::he;
    Diagnosis diagnosis = Diagnosis::unknown;
    std::vector<int> available_magnifications = {40, 20, 10, 5};
    std::string slide_id = "slide";
    std::string patient_id = "unknown";
};

struct SlideRaster {
    Image8 pixels;
    std::string slide_id;
    std::string patient_id;
    std::vector<int> available_magnifications;
    int magnification = 20;
    Stain stain = Stain::he;
    std::string tissue_label;  // majority texture class
    Diagnosis diagnosis = Diagnosis::unknown;
    int cell_size = 0;
    int cells_x = 0;
    int cells_y = 0;
    std::vector<int> cell_labels;  // -1 = background

    int label_at(int y, int x) const;
};

/// Number of built-in texture classes.
inline constexpr int kTextureClasses = 8;
std::string texture_class_name(int cls);
/// Inverse of texture_class_name; -1 when the name is not a texture class.
int texture_class_id(const std::string& name);

SlideRaster gen_synthetic_slide(std::uint64_t seed, const SlideSpec& spec);

/// Fills a w x h block of `img` with texture `cls` (used by slides and probe tasks).
void render_texture(Image8& img, int x0, int y0, int w, int h, int cls, Stain stain, double scale, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Tiles and manifests

struct TileMeta {
    std::string path;  // relative to the manifest directory
    std::string slide_id;
    std::string patient_id = "unknown";
    int magnification = 20;
    std::string stain = "unknown";
    std::string tissue = "unknown";
    std::string diagnosis = "unknown";
    double coverage = 0.0;
    bool operator==(const TileMeta&) const = default;
};

struct TileRecord {
    Image8 pixels;
    TileMeta meta;
    CropRect origin;  // position in the slide
};

/// Non-overlapping L x L grid; partial border strips are dropped.
std::vector<TileRecord> tile_grid(const SlideRaster& slide, int tile_size, double min_coverage,
                                  const HsvRanges& ranges = {});

struct Manifest {
    std::vector<TileMeta> records;
    std::uint64_t seed = 0;
    bool operator==(const Manifest&) const = default;
};

inline constexpr const char* kManifestHeader =
    "path\tslide_id\tpatient_id\tmagnification\tstain\ttissue\tdiagnosis\tcoverage";

void write_manifest(const std::filesystem::path& path, const Manifest& m);
/// Parses and validates a manifest; with `check_paths` every tile path must resolve.
Manifest read_manifest(const std::filesystem::path& path, bool check_paths = true);

// ---------------------------------------------------------------------------
// Balanced sampling

struct SamplerTargets {
    std::map<std::string, double> diagnosis_weights;
    std::map<int, double> magnification_weights;
    double no40x_boost = 1.5;
    bool tissue_flattening = false;

    static SamplerTargets defaults();
    void validate() const;
};

/// Infinite index stream over manifest records: diagnosis first, then a slide
/// (boosted when it lacks 40x), then a magnification restricted to what the
/// slide offers, then a uniform tile.
class BalancedSampler {
public:
    BalancedSampler(std::span<const TileMeta> records, SamplerTargets targets, Rng rng);

    std::size_t next();
    BalancedSampler fork(std::uint64_t worker_id) const;

    const SamplerTargets& targets() const { return targets_; }

private:
    struct SlideEntry {
        double weight = 0.0;
        std::map<int, std::vector<std::size_t>> tiles_by_mag;
        std::vector<int> mags;
        std::vector<double> mag_cdf;
    };
    struct DiagEntry {
        std::string name;
        std::vector<SlideEntry> slides;
        std::vector<double> slide_cdf;
    };

    SamplerTargets targets_;
    std::vector<DiagEntry> strata_;
    std::vector<double> diag_cdf_;
    Rng rng_;
};

/// Tissue weights after flattening: shares capped at 2x the uniform share.
std::map<std::string, double> flattened_tissue_weights(std::span<const TileMeta> records);

}  // namespace pssl
