#include "pssl/tissue.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "pssl/errors.hpp"

namespace pssl {

std::string to_string(Stain s) { return s == Stain::he ? "HE" : "IHC"; }

std::string to_string(Diagnosis d) {
    switch (d) {
        case Diagnosis::cancer: return "cancer";
        case Diagnosis::precursor: return "precursor";
        case Diagnosis::benign: return "benign";
        case Diagnosis::benign_neoplasm: return "benign_neoplasm";
        case Diagnosis::unknown: return "unknown";
    }
    return "unknown";
}

Stain parse_stain(const std::string& s) {
    if (s == "HE") return Stain::he;
    if (s == "IHC") return Stain::ihc;
    throw DataError("unknown stain '" + s + "'");
}

Diagnosis parse_diagnosis(const std::string& s) {
    for (Diagnosis d : kDiagnoses)
        if (to_string(d) == s) return d;
    throw DataError("unknown diagnosis '" + s + "'");
}

// ---------------------------------------------------------------------------

namespace {

// round(num / den) for num >= 0, den > 0, halves rounded up.
int round_ratio(long num, long den) { return static_cast<int>((2 * num + den) / (2 * den)); }

}  // namespace

Hsv8 rgb_to_hsv8(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    const int mx = std::max({r, g, b});
    const int mn = std::min({r, g, b});
    const int diff = mx - mn;
    Hsv8 out;
    out.v = mx;
    out.s = mx == 0 ? 0 : round_ratio(255L * diff, mx);
    if (diff == 0) {
        out.h = 0;
        return out;
    }
    // Hue in half-degrees is 30 * (sector offset + signed fraction) with
    // denominator diff; keep it as an exact rational until rounding.
    long num;
    if (mx == r) {
        num = 30L * (g - b);
        if (num < 0) num += 180L * diff;
    } else if (mx == g) {
        num = 60L * diff + 30L * (b - r);
    } else {
        num = 120L * diff + 30L * (r - g);
    }
    int h = round_ratio(num, diff);
    if (h >= 180) h -= 180;
    out.h = h;
    return out;
}

double tissue_coverage(const Image8& tile, const HsvRanges& ranges) {
    if (tile.pixels() == 0) return 0.0;
    std::size_t hits = 0;
    const std::uint8_t* p = tile.data.data();
    for (std::size_t i = 0; i < tile.pixels(); ++i, p += 3)
        if (ranges.contains(rgb_to_hsv8(p[0], p[1], p[2]))) ++hits;
    return static_cast<double>(hits) / static_cast<double>(tile.pixels());
}

// ---------------------------------------------------------------------------
// Procedural textures

namespace {

struct Rgb {
    float r, g, b;
};

struct Palette {
    Rgb stroma, dense, nucleus, lumen, accent;
};

Palette palette_for(Stain stain) {
    if (stain == Stain::he)
        return {{236, 172, 208}, {206, 118, 172}, {112, 62, 152}, {242, 214, 234}, {176, 84, 150}};
    return {{152, 162, 206}, {122, 130, 190}, {72, 82, 152}, {196, 204, 232}, {150, 95, 45}};
}

std::uint64_t hash3(std::uint64_t seed, std::int64_t a, std::int64_t b) {
    return mix64(seed ^ mix64(static_cast<std::uint64_t>(a) * 0x9E3779B97F4A7C15ULL ^
                              mix64(static_cast<std::uint64_t>(b) + 0x7F4A7C15ULL)));
}

double unit(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

// Jittered-grid discs: distance ratio d/radius of the nearest disc, or -1 outside.
double disc_field(double x, double y, double spacing, double radius, double presence, std::uint64_t seed) {
    const auto gx = static_cast<std::int64_t>(std::floor(x / spacing));
    const auto gy = static_cast<std::int64_t>(std::floor(y / spacing));
    double best = 2.0;
    for (std::int64_t dy = -1; dy <= 1; ++dy) {
        for (std::int64_t dx = -1; dx <= 1; ++dx) {
            const std::uint64_t h = hash3(seed, gx + dx, gy + dy);
            if (unit(mix64(h + 1)) >= presence) continue;
            const double cx = (static_cast<double>(gx + dx) + unit(h)) * spacing;
            const double cy = (static_cast<double>(gy + dy) + unit(mix64(h + 2))) * spacing;
            const double rr = radius * (0.75 + 0.5 * unit(mix64(h + 3)));
            best = std::min(best, std::hypot(x - cx, y - cy) / rr);
        }
    }
    return best < 1.0 ? best : -1.0;
}

double stripe(double x, double y, double period, double angle) {
    return std::sin(2.0 * std::numbers::pi * (x * std::cos(angle) + y * std::sin(angle)) / period);
}

Rgb texel(int cls, double x, double y, const Palette& pal, double sc, std::uint64_t seed, double angle) {
    switch (cls) {
        case 0: {  // scattered nuclei on stroma
            const double d = disc_field(x, y, 28 * sc, 8 * sc, 0.7, seed);
            return d >= 0 ? pal.nucleus : pal.stroma;
        }
        case 1: {  // fibrous bands
            return stripe(x, y, 36 * sc, angle) > 0.2 ? pal.dense : pal.stroma;
        }
        case 2: {  // dense small dots
            const double d = disc_field(x, y, 10 * sc, 3 * sc, 0.8, seed);
            return d >= 0 ? pal.nucleus : pal.dense;
        }
        case 3: {  // glands: lumen ringed by nuclei
            const double d = disc_field(x, y, 84 * sc, 34 * sc, 0.9, seed);
            if (d < 0) return pal.stroma;
            return d < 0.7 ? pal.lumen : pal.nucleus;
        }
        case 4: {  // large dark nuclei
            const double d = disc_field(x, y, 44 * sc, 14 * sc, 0.8, seed);
            return d >= 0 ? pal.accent : pal.stroma;
        }
        case 5: {  // crosshatch
            const bool a = stripe(x, y, 30 * sc, angle) > 0.3;
            const bool b = stripe(x, y, 30 * sc, angle + std::numbers::pi / 2) > 0.3;
            return (a || b) ? pal.dense : pal.lumen;
        }
        case 6: {  // sparse nuclei on dense stroma
            const double d = disc_field(x, y, 40 * sc, 6 * sc, 0.4, seed);
            return d >= 0 ? pal.nucleus : pal.dense;
        }
        default: {  // bands with dots
            if (disc_field(x, y, 14 * sc, 3 * sc, 0.6, seed) >= 0) return pal.nucleus;
            return stripe(x, y, 48 * sc, angle) > 0.0 ? pal.dense : pal.lumen;
        }
    }
}

}  // namespace

std::string texture_class_name(int cls) { return "texture" + std::to_string(cls); }

int texture_class_id(const std::string& name) {
    if (name.rfind("texture", 0) != 0) return -1;
    int v = -1;
    const char* b = name.data() + 7;
    const char* e = name.data() + name.size();
    auto [p, ec] = std::from_chars(b, e, v);
    return (ec == std::errc() && p == e) ? v : -1;
}

void render_texture(Image8& img, int x0, int y0, int w, int h, int cls, Stain stain, double scale,
                    std::uint64_t seed) {
    const Palette pal = palette_for(stain);
    const double angle = unit(mix64(seed + 11)) * std::numbers::pi;
    const std::uint64_t tex_seed = mix64(seed + 17);
    for (int y = y0; y < y0 + h; ++y) {
        for (int x = x0; x < x0 + w; ++x) {
            const Rgb c = texel(cls, x, y, pal, scale, tex_seed, angle);
            const std::uint64_t n = hash3(seed, x, y);
            const float jitter[3] = {static_cast<float>(static_cast<int>(n & 15) - 7),
                                     static_cast<float>(static_cast<int>((n >> 4) & 15) - 7),
                                     static_cast<float>(static_cast<int>((n >> 8) & 15) - 7)};
            img.at(y, x, 0) = static_cast<std::uint8_t>(std::clamp(c.r + jitter[0], 0.0f, 255.0f));
            img.at(y, x, 1) = static_cast<std::uint8_t>(std::clamp(c.g + jitter[1], 0.0f, 255.0f));
            img.at(y, x, 2) = static_cast<std::uint8_t>(std::clamp(c.b + jitter[2], 0.0f, 255.0f));
        }
    }
}

int SlideRaster::label_at(int y, int x) const {
    if (cell_size <= 0 || cell_labels.empty()) return -1;  // raster without a label map
    const int cx = std::min(x / cell_size, cells_x - 1);
    const int cy = std::min(y / cell_size, cells_y - 1);
    return cell_labels[static_cast<std::size_t>(cy) * cells_x + cx];
}

SlideRaster gen_synthetic_slide(std::uint64_t seed, const SlideSpec& spec) {
    if (spec.classes < 2 && spec.class_pool.size() < 2)
        throw ParameterError("synthetic slide needs at least 2 texture classes");
    if (spec.cell_size < 1 || spec.height < spec.cell_size || spec.width < spec.cell_size)
        throw ParameterError("synthetic slide smaller than one tile");
    if (spec.background_fraction < 0.0 || spec.background_fraction > 1.0)
        throw ParameterError("background_fraction outside [0, 1]");

    std::vector<int> pool = spec.class_pool;
    if (pool.empty())
        for (int c = 0; c < spec.classes; ++c) pool.push_back(c % kTextureClasses);

    Rng rng(seed);
    SlideRaster slide;
    slide.slide_id = spec.slide_id;
    slide.patient_id = spec.patient_id;
    slide.available_magnifications = spec.available_magnifications;
    slide.magnification = spec.magnification;
    slide.stain = spec.stain;
    slide.diagnosis = spec.diagnosis;
    slide.cell_size = spec.cell_size;
    slide.cells_x = (spec.width + spec.cell_size - 1) / spec.cell_size;
    slide.cells_y = (spec.height + spec.cell_size - 1) / spec.cell_size;
    const std::size_t ncells = static_cast<std::size_t>(slide.cells_x) * slide.cells_y;

    // Background cells first, then tissue cells cycle through the class pool
    // in shuffled order so every class shows up when there is room.
    std::vector<std::size_t> order(ncells);
    for (std::size_t i = 0; i < ncells; ++i) order[i] = i;
    for (std::size_t i = ncells; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const auto n_bg = static_cast<std::size_t>(std::llround(spec.background_fraction * static_cast<double>(ncells)));
    std::vector<int> shuffled_pool = pool;
    for (std::size_t i = shuffled_pool.size(); i > 1; --i) std::swap(shuffled_pool[i - 1], shuffled_pool[rng.below(i)]);
    slide.cell_labels.assign(ncells, -1);
    for (std::size_t k = n_bg; k < ncells; ++k) {
        const std::size_t t = k - n_bg;
        slide.cell_labels[order[k]] =
            t < shuffled_pool.size() ? shuffled_pool[t] : pool[rng.below(pool.size())];
    }

    slide.pixels = Image8(spec.height, spec.width);
    // Features grow with magnification, compressed (square root) so that every
    // class stays resolvable from 5x to 40x inside one tile.
    const double scale = spec.feature_scale * std::sqrt(spec.magnification / 20.0);
    const std::uint64_t tex_seed = rng.next_u64();
    std::map<int, int> counts;
    for (int cy = 0; cy < slide.cells_y; ++cy) {
        for (int cx = 0; cx < slide.cells_x; ++cx) {
            const int x0 = cx * spec.cell_size;
            const int y0 = cy * spec.cell_size;
            const int w = std::min(spec.cell_size, spec.width - x0);
            const int h = std::min(spec.cell_size, spec.height - y0);
            const int label = slide.cell_labels[static_cast<std::size_t>(cy) * slide.cells_x + cx];
            if (label < 0) {
                for (int y = y0; y < y0 + h; ++y)
                    for (int x = x0; x < x0 + w; ++x) {
                        const std::uint64_t n = hash3(tex_seed, x, y);
                        slide.pixels.at(y, x, 0) = static_cast<std::uint8_t>(243 + (n & 3));
                        slide.pixels.at(y, x, 1) = static_cast<std::uint8_t>(241 + ((n >> 2) & 3));
                        slide.pixels.at(y, x, 2) = static_cast<std::uint8_t>(243 + ((n >> 4) & 3));
                    }
                continue;
            }
            ++counts[label];
            // Same class shares a texture seed so regions join seamlessly.
            render_texture(slide.pixels, x0, y0, w, h, label, spec.stain, scale, mix64(tex_seed ^ static_cast<std::uint64_t>(label)));
        }
    }
    int best = -1, best_count = 0;
    for (auto [label, n] : counts)
        if (n > best_count) best = label, best_count = n;
    slide.tissue_label = best < 0 ? "unknown" : texture_class_name(best);
    return slide;
}

// ---------------------------------------------------------------------------

std::vector<TileRecord> tile_grid(const SlideRaster& slide, int tile_size, double min_coverage,
                                  const HsvRanges& ranges) {
    if (tile_size != 224 && tile_size != 392) throw ParameterError("tile size must be 224 or 392");
    if (min_coverage < 0.0 || min_coverage > 1.0) throw ParameterError("min_coverage outside [0, 1]");
    std::vector<TileRecord> tiles;
    const int nx = slide.pixels.width / tile_size;
    const int ny = slide.pixels.height / tile_size;
    for (int ty = 0; ty < ny; ++ty) {
        for (int tx = 0; tx < nx; ++tx) {
            const CropRect r{tx * tile_size, ty * tile_size, tile_size, tile_size};
            Image8 px = crop(slide.pixels, r);
            const double cov = tissue_coverage(px, ranges);
            if (cov < min_coverage) continue;
            TileRecord rec;
            rec.pixels = std::move(px);
            rec.origin = r;
            rec.meta.slide_id = slide.slide_id;
            rec.meta.patient_id = slide.patient_id;
            rec.meta.magnification = slide.magnification;
            rec.meta.stain = to_string(slide.stain);
            const int label = slide.label_at(r.y + tile_size / 2, r.x + tile_size / 2);
            rec.meta.tissue = label < 0 ? "unknown" : texture_class_name(label);
            rec.meta.diagnosis = to_string(slide.diagnosis);
            rec.meta.coverage = cov;
            tiles.push_back(std::move(rec));
        }
    }
    return tiles;
}

// ---------------------------------------------------------------------------

namespace {

std::string format_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t pos = line.find('\t', start);
        out.push_back(line.substr(start, pos - start));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return out;
}

}  // namespace

void write_manifest(const std::filesystem::path& path, const Manifest& m) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << kManifestHeader << "\n";
    for (const TileMeta& r : m.records) {
        f << r.path << '\t' << r.slide_id << '\t' << r.patient_id << '\t' << r.magnification << '\t' << r.stain
          << '\t' << r.tissue << '\t' << r.diagnosis << '\t' << format_double(r.coverage) << '\n';
    }
    f << "# seed=" << m.seed << "\n";
    if (!f) throw IoError("short write to " + path.string());
}

Manifest read_manifest(const std::filesystem::path& path, bool check_paths) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open manifest " + path.string());
    std::string line;
    if (!std::getline(f, line) || line != kManifestHeader)
        throw DataError("manifest " + path.string() + " has an unexpected header");
    Manifest m;
    std::size_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line.rfind("# seed=", 0) == 0) {
            m.seed = std::stoull(line.substr(7));
            continue;
        }
        if (line[0] == '#') continue;
        const auto cols = split_tabs(line);
        if (cols.size() != 8)
            throw DataError("manifest line " + std::to_string(lineno) + " has " + std::to_string(cols.size()) +
                            " columns, expected 8");
        TileMeta r;
        r.path = cols[0];
        r.slide_id = cols[1];
        r.patient_id = cols[2];
        r.magnification = std::stoi(cols[3]);
        r.stain = cols[4];
        r.tissue = cols[5];
        r.diagnosis = cols[6];
        const auto& cov = cols[7];
        auto [p, ec] = std::from_chars(cov.data(), cov.data() + cov.size(), r.coverage);
        if (ec != std::errc() || p != cov.data() + cov.size())
            throw DataError("manifest line " + std::to_string(lineno) + " has a bad coverage value");
        for (const std::string* field : {&r.path, &r.slide_id, &r.patient_id, &r.stain, &r.tissue, &r.diagnosis})
            if (field->empty())
                throw DataError("manifest line " + std::to_string(lineno) + " has an empty field (use 'unknown')");
        if (check_paths && !std::filesystem::exists(path.parent_path() / r.path))
            throw DataError("manifest path does not resolve: " + r.path);
        m.records.push_back(std::move(r));
    }
    return m;
}

// ---------------------------------------------------------------------------

SamplerTargets SamplerTargets::defaults() {
    SamplerTargets t;
    t.diagnosis_weights = {{"cancer", 0.40}, {"precursor", 0.15}, {"benign", 0.08},
                           {"benign_neoplasm", 0.02}, {"unknown", 0.35}};
    t.magnification_weights = {{40, 0.20}, {20, 0.40}, {10, 0.20}, {5, 0.20}};
    return t;
}

void SamplerTargets::validate() const {
    auto check = [](const auto& weights, const char* what) {
        double sum = 0.0;
        for (const auto& [k, w] : weights) {
            if (!(w >= 0.0)) throw ConfigError(std::string(what) + " weights must be non-negative");
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-9) throw ConfigError(std::string(what) + " weights must sum to 1");
    };
    check(diagnosis_weights, "diagnosis");
    check(magnification_weights, "magnification");
    if (!(no40x_boost > 0.0)) throw ConfigError("no40x boost must be positive");
}

std::map<std::string, double> flattened_tissue_weights(std::span<const TileMeta> records) {
    std::map<std::string, std::set<std::string>> slides_by_tissue;
    std::set<std::string> slides;
    for (const auto& r : records) {
        slides_by_tissue[r.tissue].insert(r.slide_id);
        slides.insert(r.slide_id);
    }
    std::map<std::string, double> weights;
    if (slides_by_tissue.empty()) return weights;
    const double cap = 2.0 / static_cast<double>(slides_by_tissue.size());
    double total_share = 0.0;
    std::map<std::string, double> share;
    for (const auto& [t, s] : slides_by_tissue) {
        const double f = static_cast<double>(s.size()) / static_cast<double>(slides.size());
        share[t] = std::min(f, cap);
        total_share += share[t];
    }
    for (const auto& [t, s] : slides_by_tissue) {
        const double f = static_cast<double>(s.size()) / static_cast<double>(slides.size());
        weights[t] = (share[t] / total_share) / f;
    }
    return weights;
}

namespace {

std::vector<double> make_cdf(const std::vector<double>& w) {
    std::vector<double> cdf(w.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) cdf[i] = (acc += w[i]);
    for (double& c : cdf) c /= acc;
    return cdf;
}

std::size_t draw(const std::vector<double>& cdf, Rng& rng) {
    const double u = rng.next_double();
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    return std::min(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
}

}  // namespace

BalancedSampler::BalancedSampler(std::span<const TileMeta> records, SamplerTargets targets, Rng rng)
    : targets_(std::move(targets)), rng_(rng) {
    targets_.validate();
    if (records.empty()) throw ConfigError("sampler needs a non-empty manifest");
    const auto tissue_w = targets_.tissue_flattening ? flattened_tissue_weights(records)
                                                     : std::map<std::string, double>{};

    // diagnosis -> slide -> magnification -> tile indices
    std::map<std::string, std::map<std::string, std::map<int, std::vector<std::size_t>>>> tree;
    std::map<std::string, std::string> slide_tissue;
    for (std::size_t i = 0; i < records.size(); ++i) {
        tree[records[i].diagnosis][records[i].slide_id][records[i].magnification].push_back(i);
        slide_tissue.emplace(records[i].slide_id, records[i].tissue);
    }
    for (const auto& [k, w] : tree)
        if (!targets_.diagnosis_weights.count(k))
            throw ConfigError("manifest diagnosis '" + k + "' has no sampling weight");

    std::vector<double> diag_w;
    for (const auto& [name, w] : targets_.diagnosis_weights) {
        if (w <= 0.0) continue;
        auto it = tree.find(name);
        if (it == tree.end()) throw ConfigError("sampler stratum '" + name + "' has positive weight but no tiles");
        DiagEntry d;
        d.name = name;
        std::vector<double> slide_w;
        for (auto& [slide_id, by_mag] : it->second) {
            SlideEntry s;
            s.tiles_by_mag = by_mag;
            double boost = by_mag.count(40) ? 1.0 : targets_.no40x_boost;
            if (targets_.tissue_flattening) boost *= tissue_w.at(slide_tissue.at(slide_id));
            s.weight = boost;
            std::vector<double> mw;
            for (const auto& [mag, tiles] : by_mag) {
                s.mags.push_back(mag);
                auto mit = targets_.magnification_weights.find(mag);
                mw.push_back(mit == targets_.magnification_weights.end() ? 0.0 : mit->second);
            }
            // A slide whose magnifications all carry zero weight is drawn uniformly.
            if (std::all_of(mw.begin(), mw.end(), [](double v) { return v <= 0.0; }))
                std::fill(mw.begin(), mw.end(), 1.0);
            s.mag_cdf = make_cdf(mw);
            slide_w.push_back(s.weight);
            d.slides.push_back(std::move(s));
        }
        d.slide_cdf = make_cdf(slide_w);
        diag_w.push_back(w);
        strata_.push_back(std::move(d));
    }
    if (strata_.empty()) throw ConfigError("sampler has no stratum with positive weight");
    diag_cdf_ = make_cdf(diag_w);
}

std::size_t BalancedSampler::next() {
    const DiagEntry& d = strata_[draw(diag_cdf_, rng_)];
    const SlideEntry& s = d.slides[draw(d.slide_cdf, rng_)];
    const int mag = s.mags[draw(s.mag_cdf, rng_)];
    const auto& tiles = s.tiles_by_mag.at(mag);
    return tiles[rng_.below(tiles.size())];
}

BalancedSampler BalancedSampler::fork(std::uint64_t worker_id) const {
    BalancedSampler copy = *this;
    copy.rng_ = rng_.fork(worker_id);
    return copy;
}

}  // namespace pssl
