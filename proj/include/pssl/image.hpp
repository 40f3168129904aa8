#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace pssl {

/// 8-bit interleaved RGB raster (slides, tiles, PPM files).
struct Image8 {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;  // HWC

    Image8() = default;
    Image8(int h, int w, std::uint8_t fill = 0)
        : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {}

    std::uint8_t& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    std::uint8_t at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
    bool operator==(const Image8&) const = default;
};

/// Float RGB raster on the 0..255 scale (augmented views).
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> data;  // HWC

    Image() = default;
    Image(int h, int w, float fill = 0.0f)
        : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {}

    float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
    bool operator==(const Image&) const = default;
};

struct CropRect {
    int x = 0;
    int y = 0;
    int w = 0;
    int h = 0;
    bool operator==(const CropRect&) const = default;
};

Image to_float(const Image8& img);
/// Rounds to nearest and clamps to 0..255.
Image8 to_u8(const Image& img);

/// Bilinear resize with half-pixel centers and edge clamping.
Image bilinear_resize(const Image& img, int out_h, int out_w);
/// Resize the sub-rectangle `rect` of `img`; samples never leave the rect.
Image resize_region(const Image& img, const CropRect& rect, int out_h, int out_w);
Image8 resize_u8(const Image8& img, int out_h, int out_w);

Image crop(const Image& img, const CropRect& rect);
Image8 crop(const Image8& img, const CropRect& rect);

void write_ppm(const std::filesystem::path& path, const Image8& img);
Image8 read_ppm(const std::filesystem::path& path);

}  // namespace pssl
