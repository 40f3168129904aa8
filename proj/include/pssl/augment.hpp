#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pssl/image.hpp"
#include "pssl/rng.hpp"

namespace pssl {

struct Range {
    double lo = 0.0;
    double hi = 0.0;
    bool operator==(const Range&) const = default;
};

enum class CropMethod { ect, crop_resize };

struct EctConfig {
    int source_size = 392;
    int global_size = 224;
    int local_size = 98;
    Range scale{0.9, 1.1};
    Range aspect{0.95, 1.05};
    int n_global = 2;
    int n_local = 8;

    CropMethod method = CropMethod::ect;
    // Random-resized-crop baseline, applied to the central global_size tile.
    Range crop_global_scale{0.32, 1.0};
    Range crop_local_scale{0.05, 0.32};
    Range crop_aspect{0.75, 4.0 / 3.0};

    /// Throws ConfigError when a crop at the top of the ranges cannot fit.
    void validate() const;
    /// Scale range expressed as area fraction of the source: s * (L / N)^2.
    Range adjusted_scale(int target) const;
};

struct PhotometricPolicy {
    double hflip_p = 0.5;
    double vflip_p = 0.5;
    double jitter_p = 0.8;
    double brightness = 0.4;
    double contrast = 0.4;
    double saturation = 0.2;
    double hue = 0.1;
    double grayscale_p = 0.2;
    bool solarize_enabled = false;
    double solarize_p = 0.2;
    float solarize_threshold = 128.0f;

    static PhotometricPolicy disabled();
    void validate() const;
};

struct View {
    Image image;
    CropRect rect;
    std::vector<std::string> ops;
};

struct ViewSet {
    std::vector<View> global_views;
    std::vector<View> local_views;
};

/// Samples only the rectangle of an ECT draw (same stream use as sample_ect).
CropRect sample_ect_rect(int target, const EctConfig& cfg, Rng& rng);
std::pair<CropRect, Image> sample_ect(const Image& source, int target, const EctConfig& cfg, Rng& rng);

/// Random-resized-crop: 10 attempts, then a center-crop fallback.
CropRect sample_crop_resize_rect(int height, int width, Range scale, Range aspect, Rng& rng);
std::pair<CropRect, Image> sample_crop_resize(const Image& image, int target, Range scale, Range aspect, Rng& rng);

/// Order: flip-h, flip-v, jitter, grayscale, solarize. Appends applied op names to `log`.
Image apply_photometric(const Image& view, const PhotometricPolicy& policy, Rng& rng,
                        std::vector<std::string>* log = nullptr);

Image flip_horizontal(const Image& img);
Image flip_vertical(const Image& img);
/// Rec.601 luma replicated over the three channels.
Image grayscale(const Image& img);
Image solarize(const Image& img, float threshold);

ViewSet make_views(const Image& tile, const PhotometricPolicy& policy, const EctConfig& cfg, Rng& rng);

double pair_iou(const CropRect& a, const CropRect& b);

struct IouEstimate {
    double mean = 0.0;
    double stderr_ = 0.0;
};
IouEstimate expected_iou(const EctConfig& cfg, int n_samples, Rng& rng);

}  // namespace pssl
