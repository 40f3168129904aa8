#include "pssl/augment.hpp"

#include <algorithm>
#include <cmath>

#include "pssl/errors.hpp"

namespace pssl {

namespace {

bool valid_range(const Range& r) { return r.lo > 0.0 && r.hi >= r.lo; }

double log_uniform(const Range& r, Rng& rng) {
    return std::exp(rng.uniform_closed_range(std::log(r.lo), std::log(r.hi)));
}

}  // namespace

void EctConfig::validate() const {
    if (!valid_range(scale) || !valid_range(aspect)) throw ConfigError("ECT scale/aspect ranges must be positive intervals");
    if (source_size < 1 || global_size < 1 || local_size < 1) throw ConfigError("view sizes must be positive");
    if (global_size > source_size || local_size > global_size)
        throw ConfigError("ECT requires source >= global >= local view size");
    if (n_global < 1 || n_local < 0) throw ConfigError("need at least one global view");
    for (int target : {global_size, local_size}) {
        const double need = target * std::sqrt(scale.hi * std::max(aspect.hi, 1.0 / aspect.lo));
        if (std::lround(need) > source_size)
            throw ConfigError("ECT crop of up to " + std::to_string(need) + " px cannot fit in a " +
                              std::to_string(source_size) + " px source");
    }
    if (!valid_range(crop_global_scale) || !valid_range(crop_local_scale) || !valid_range(crop_aspect))
        throw ConfigError("crop-and-resize ranges must be positive intervals");
}

Range EctConfig::adjusted_scale(int target) const {
    const double r = static_cast<double>(target) / source_size;
    return {scale.lo * r * r, scale.hi * r * r};
}

void PhotometricPolicy::validate() const {
    for (double p : {hflip_p, vflip_p, jitter_p, grayscale_p, solarize_p})
        if (p < 0.0 || p > 1.0) throw ConfigError("photometric probabilities must lie in [0, 1]");
}

PhotometricPolicy PhotometricPolicy::disabled() {
    PhotometricPolicy p;
    p.hflip_p = p.vflip_p = p.jitter_p = p.grayscale_p = p.solarize_p = 0.0;
    p.solarize_enabled = false;
    return p;
}

// ---------------------------------------------------------------------------

CropRect sample_ect_rect(int target, const EctConfig& cfg, Rng& rng) {
    const int n = cfg.source_size;
    const double s = rng.uniform_closed_range(cfg.scale.lo, cfg.scale.hi);
    const double a = log_uniform(cfg.aspect, rng);
    const int w = std::clamp(static_cast<int>(std::lround(target * std::sqrt(s * a))), 1, n);
    const int h = std::clamp(static_cast<int>(std::lround(target * std::sqrt(s / a))), 1, n);
    const int x = static_cast<int>(rng.integer(0, n - w));
    const int y = static_cast<int>(rng.integer(0, n - h));
    return {x, y, w, h};
}

std::pair<CropRect, Image> sample_ect(const Image& source, int target, const EctConfig& cfg, Rng& rng) {
    if (source.height != cfg.source_size || source.width != cfg.source_size)
        throw DimensionError("ECT source must be " + std::to_string(cfg.source_size) + " px square");
    const CropRect r = sample_ect_rect(target, cfg, rng);
    return {r, resize_region(source, r, target, target)};
}

CropRect sample_crop_resize_rect(int height, int width, Range scale, Range aspect, Rng& rng) {
    const double area = static_cast<double>(height) * width;
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target_area = area * rng.uniform_closed_range(scale.lo, scale.hi);
        const double ratio = log_uniform(aspect, rng);
        const int w = static_cast<int>(std::lround(std::sqrt(target_area * ratio)));
        const int h = static_cast<int>(std::lround(std::sqrt(target_area / ratio)));
        if (w > 0 && w <= width && h > 0 && h <= height) {
            const int x = static_cast<int>(rng.integer(0, width - w));
            const int y = static_cast<int>(rng.integer(0, height - h));
            return {x, y, w, h};
        }
    }
    const double in_ratio = static_cast<double>(width) / height;
    int w = width, h = height;
    if (in_ratio < aspect.lo) {
        h = std::min(height, static_cast<int>(std::lround(w / aspect.lo)));
    } else if (in_ratio > aspect.hi) {
        w = std::min(width, static_cast<int>(std::lround(h * aspect.hi)));
    }
    return {(width - w) / 2, (height - h) / 2, w, h};
}

std::pair<CropRect, Image> sample_crop_resize(const Image& image, int target, Range scale, Range aspect, Rng& rng) {
    const CropRect r = sample_crop_resize_rect(image.height, image.width, scale, aspect, rng);
    return {r, resize_region(image, r, target, target)};
}

// ---------------------------------------------------------------------------

Image flip_horizontal(const Image& img) {
    Image out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
    return out;
}

Image flip_vertical(const Image& img) {
    Image out(img.height, img.width);
    const std::size_t row = static_cast<std::size_t>(img.width) * 3;
    for (int y = 0; y < img.height; ++y)
        std::copy_n(&img.data[(img.height - 1 - y) * row], row, &out.data[y * row]);
    return out;
}

Image grayscale(const Image& img) {
    Image out(img.height, img.width);
    for (std::size_t i = 0; i < img.pixels(); ++i) {
        const float* p = &img.data[i * 3];
        const float l = 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2];
        out.data[i * 3] = out.data[i * 3 + 1] = out.data[i * 3 + 2] = l;
    }
    return out;
}

Image solarize(const Image& img, float threshold) {
    Image out = img;
    for (float& v : out.data)
        if (v >= threshold) v = 255.0f - v;
    return out;
}

namespace {

float clamp255(float v) { return std::clamp(v, 0.0f, 255.0f); }

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
    const float mx = std::max({r, g, b});
    const float mn = std::min({r, g, b});
    const float d = mx - mn;
    v = mx;
    s = mx > 0.0f ? d / mx : 0.0f;
    if (d <= 0.0f) {
        h = 0.0f;
        return;
    }
    if (mx == r) h = (g - b) / d;
    else if (mx == g) h = 2.0f + (b - r) / d;
    else h = 4.0f + (r - g) / d;
    h /= 6.0f;
    if (h < 0.0f) h += 1.0f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
    const float h6 = h * 6.0f;
    const int i = static_cast<int>(std::floor(h6)) % 6;
    const float f = h6 - std::floor(h6);
    const float p = v * (1.0f - s), q = v * (1.0f - s * f), t = v * (1.0f - s * (1.0f - f));
    switch (i) {
        case 0: r = v, g = t, b = p; break;
        case 1: r = q, g = v, b = p; break;
        case 2: r = p, g = v, b = t; break;
        case 3: r = p, g = q, b = v; break;
        case 4: r = t, g = p, b = v; break;
        default: r = v, g = p, b = q; break;
    }
}

void color_jitter(Image& img, const PhotometricPolicy& pol, Rng& rng, std::vector<std::string>* log) {
    const auto factor = [&rng](double strength) {
        return strength > 0.0 ? static_cast<float>(rng.uniform(1.0 - strength, 1.0 + strength)) : 1.0f;
    };
    const float fb = factor(pol.brightness);
    const float fc = factor(pol.contrast);
    const float fs = factor(pol.saturation);
    const float fh = pol.hue > 0.0 ? static_cast<float>(rng.uniform(-pol.hue, pol.hue)) : 0.0f;
    for (float& v : img.data) v = clamp255(v * fb);
    double mean = 0.0;
    for (std::size_t i = 0; i < img.pixels(); ++i)
        mean += 0.299 * img.data[i * 3] + 0.587 * img.data[i * 3 + 1] + 0.114 * img.data[i * 3 + 2];
    const auto m = static_cast<float>(mean / static_cast<double>(std::max<std::size_t>(img.pixels(), 1)));
    for (float& v : img.data) v = clamp255((v - m) * fc + m);
    for (std::size_t i = 0; i < img.pixels(); ++i) {
        float* p = &img.data[i * 3];
        const float l = 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2];
        for (int c = 0; c < 3; ++c) p[c] = clamp255((p[c] - l) * fs + l);
    }
    if (fh != 0.0f) {
        for (std::size_t i = 0; i < img.pixels(); ++i) {
            float* p = &img.data[i * 3];
            float h, s, v;
            rgb_to_hsv(p[0] / 255.0f, p[1] / 255.0f, p[2] / 255.0f, h, s, v);
            h = h + fh;
            h -= std::floor(h);
            float r, g, b;
            hsv_to_rgb(h, s, v, r, g, b);
            p[0] = clamp255(r * 255.0f), p[1] = clamp255(g * 255.0f), p[2] = clamp255(b * 255.0f);
        }
    }
    if (log) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "jitter(b=%.4f,c=%.4f,s=%.4f,h=%.4f)", fb, fc, fs, fh);
        log->emplace_back(buf);
    }
}

}  // namespace

Image apply_photometric(const Image& view, const PhotometricPolicy& pol, Rng& rng, std::vector<std::string>* log) {
    Image img = view;
    // Every draw happens regardless of outcome so the stream layout does not
    // depend on which ops fire.
    const bool hflip = rng.next_double() < pol.hflip_p;
    const bool vflip = rng.next_double() < pol.vflip_p;
    const bool jitter = rng.next_double() < pol.jitter_p;
    const bool gray = rng.next_double() < pol.grayscale_p;
    const bool solar = rng.next_double() < pol.solarize_p && pol.solarize_enabled;
    if (hflip) {
        img = flip_horizontal(img);
        if (log) log->emplace_back("hflip");
    }
    if (vflip) {
        img = flip_vertical(img);
        if (log) log->emplace_back("vflip");
    }
    if (jitter) color_jitter(img, pol, rng, log);
    if (gray) {
        img = grayscale(img);
        if (log) log->emplace_back("grayscale");
    }
    if (solar) {
        img = solarize(img, pol.solarize_threshold);
        if (log) log->emplace_back("solarize");
    }
    return img;
}

// ---------------------------------------------------------------------------

ViewSet make_views(const Image& tile, const PhotometricPolicy& policy, const EctConfig& cfg, Rng& rng) {
    if (tile.height != cfg.source_size || tile.width != cfg.source_size)
        throw DimensionError("make_views expects a " + std::to_string(cfg.source_size) + " px source tile, got " +
                             std::to_string(tile.height) + "x" + std::to_string(tile.width));
    const Rng base = rng.fork(rng.next_u64());
    ViewSet vs;
    Image center;
    if (cfg.method == CropMethod::crop_resize) {
        const int off = (cfg.source_size - cfg.global_size) / 2;
        center = crop(tile, CropRect{off, off, cfg.global_size, cfg.global_size});
    }
    const int total = cfg.n_global + cfg.n_local;
    for (int i = 0; i < total; ++i) {
        Rng vr = base.fork(static_cast<std::uint64_t>(i));
        const bool is_global = i < cfg.n_global;
        const int size = is_global ? cfg.global_size : cfg.local_size;
        View v;
        if (cfg.method == CropMethod::ect) {
            auto [rect, img] = sample_ect(tile, size, cfg, vr);
            v.rect = rect;
            v.image = std::move(img);
        } else {
            auto [rect, img] = sample_crop_resize(center, size, is_global ? cfg.crop_global_scale : cfg.crop_local_scale,
                                                  cfg.crop_aspect, vr);
            const int off = (cfg.source_size - cfg.global_size) / 2;
            v.rect = {rect.x + off, rect.y + off, rect.w, rect.h};
            v.image = std::move(img);
        }
        v.image = apply_photometric(v.image, policy, vr, &v.ops);
        (is_global ? vs.global_views : vs.local_views).push_back(std::move(v));
    }
    return vs;
}

double pair_iou(const CropRect& a, const CropRect& b) {
    const long ix = std::max(0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
    const long iy = std::max(0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
    const long inter = ix * iy;
    const long uni = static_cast<long>(a.w) * a.h + static_cast<long>(b.w) * b.h - inter;
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

IouEstimate expected_iou(const EctConfig& cfg, int n_samples, Rng& rng) {
    if (n_samples < 1000) throw ParameterError("expected_iou needs at least 1000 samples");
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n_samples; ++i) {
        const CropRect a = sample_ect_rect(cfg.global_size, cfg, rng);
        const CropRect b = sample_ect_rect(cfg.global_size, cfg, rng);
        const double v = pair_iou(a, b);
        sum += v;
        sum2 += v * v;
    }
    const double n = n_samples;
    const double mean = sum / n;
    const double var = std::max(0.0, sum2 / n - mean * mean);
    return {mean, std::sqrt(var / n)};
}

}  // namespace pssl
