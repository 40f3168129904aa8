#include "pssl/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "pssl/errors.hpp"

namespace pssl {

Image to_float(const Image8& img) {
    Image out(img.height, img.width);
    std::transform(img.data.begin(), img.data.end(), out.data.begin(),
                   [](std::uint8_t v) { return static_cast<float>(v); });
    return out;
}

Image8 to_u8(const Image& img) {
    Image8 out(img.height, img.width);
    std::transform(img.data.begin(), img.data.end(), out.data.begin(), [](float v) {
        return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    });
    return out;
}

namespace {

struct AxisTap {
    int i0;
    int i1;
    float frac;
};

// Half-pixel-center source taps for `out` samples over [offset, offset + in).
std::vector<AxisTap> axis_taps(int in, int out, int offset) {
    std::vector<AxisTap> taps(out);
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * scale - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const int i0 = static_cast<int>(std::floor(src));
        const int i1 = std::min(i0 + 1, in - 1);
        taps[o] = {i0 + offset, i1 + offset, static_cast<float>(src - i0)};
    }
    return taps;
}

}  // namespace

Image resize_region(const Image& img, const CropRect& r, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw ParameterError("resize target dims must be >= 1");
    if (r.w < 1 || r.h < 1 || r.x < 0 || r.y < 0 || r.x + r.w > img.width || r.y + r.h > img.height)
        throw ParameterError("resize region outside image");
    Image out(out_h, out_w);
    if (r.w == out_w && r.h == out_h) {
        for (int y = 0; y < out_h; ++y) {
            const float* src = &img.data[(static_cast<std::size_t>(r.y + y) * img.width + r.x) * 3];
            std::copy(src, src + static_cast<std::size_t>(out_w) * 3, &out.data[static_cast<std::size_t>(y) * out_w * 3]);
        }
        return out;
    }
    const auto xs = axis_taps(r.w, out_w, r.x);
    const auto ys = axis_taps(r.h, out_h, r.y);
    const std::size_t stride = static_cast<std::size_t>(img.width) * 3;
    float* dst = out.data.data();
    for (int oy = 0; oy < out_h; ++oy) {
        const float* row0 = img.data.data() + ys[oy].i0 * stride;
        const float* row1 = img.data.data() + ys[oy].i1 * stride;
        const float fy = ys[oy].frac;
        for (int ox = 0; ox < out_w; ++ox) {
            const AxisTap& t = xs[ox];
            const float* a = row0 + t.i0 * 3;
            const float* b = row0 + t.i1 * 3;
            const float* c = row1 + t.i0 * 3;
            const float* d = row1 + t.i1 * 3;
            for (int ch = 0; ch < 3; ++ch) {
                const float top = a[ch] + (b[ch] - a[ch]) * t.frac;
                const float bot = c[ch] + (d[ch] - c[ch]) * t.frac;
                *dst++ = top + (bot - top) * fy;
            }
        }
    }
    return out;
}

Image bilinear_resize(const Image& img, int out_h, int out_w) {
    if (img.height < 1 || img.width < 1) throw ParameterError("resize source is empty");
    return resize_region(img, CropRect{0, 0, img.width, img.height}, out_h, out_w);
}

Image8 resize_u8(const Image8& img, int out_h, int out_w) {
    return to_u8(bilinear_resize(to_float(img), out_h, out_w));
}

Image crop(const Image& img, const CropRect& r) {
    return resize_region(img, r, r.h, r.w);
}

Image8 crop(const Image8& img, const CropRect& r) {
    if (r.w < 1 || r.h < 1 || r.x < 0 || r.y < 0 || r.x + r.w > img.width || r.y + r.h > img.height)
        throw ParameterError("crop outside image");
    Image8 out(r.h, r.w);
    for (int y = 0; y < r.h; ++y) {
        const auto* src = &img.data[(static_cast<std::size_t>(r.y + y) * img.width + r.x) * 3];
        std::copy(src, src + static_cast<std::size_t>(r.w) * 3, &out.data[static_cast<std::size_t>(y) * r.w * 3]);
    }
    return out;
}

void write_ppm(const std::filesystem::path& path, const Image8& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
    if (!f) throw IoError("short write to " + path.string());
}

namespace {

// PPM header tokens are whitespace separated and may carry '#' comments.
std::string next_token(std::istream& in) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {}
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok;
}

}  // namespace

Image8 read_ppm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    if (next_token(f) != "P6") throw DataError(path.string() + " is not a binary PPM (P6)");
    int w = 0, h = 0, maxv = 0;
    try {
        w = std::stoi(next_token(f));
        h = std::stoi(next_token(f));
        maxv = std::stoi(next_token(f));
    } catch (const std::exception&) {
        throw DataError("malformed PPM header in " + path.string());
    }
    if (w < 1 || h < 1 || maxv != 255) throw DataError("unsupported PPM geometry/depth in " + path.string());
    Image8 img(h, w);
    f.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
    if (f.gcount() != static_cast<std::streamsize>(img.data.size()))
        throw DataError("truncated PPM payload in " + path.string());
    return img;
}

}  // namespace pssl
