#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "gcisg/config.hpp"
#include "gcisg/rng.hpp"
#include "gcisg/serialize.hpp"
#include "gcisg/tensor.hpp"

namespace gcisg {

// ============================================================================
// latents
// ============================================================================

// What the image is: the label depends on class_id and nothing else.
struct ContentLatent {
    int class_id = 0;
    double pos_x = 0.5;     // center, fraction of width
    double pos_y = 0.5;     // center, fraction of height
    double scale = 0.5;     // silhouette diameter, fraction of min extent
    double rotation = 0.0;  // radians
};

// How the image looks: none of these fields may alter the silhouette family.
struct StyleLatent {
    int palette_id = 0;
    int texture_id = 0;  // 0 = flat background
    double blur_sigma = 0.0;
    double noise_sigma = 0.0;
    double brightness = 0.0;
    double contrast = 1.0;
    double hue_shift = 0.0;
    std::uint64_t noise_seed = 0;
};

enum class Domain { synthetic, real_world };

inline const char* to_string(Domain d) {
    return d == Domain::synthetic ? "synthetic" : "real";
}

struct Sample {
    Tensor image;  // [3,H,W] in [0,1]
    int label = 0;
    Domain domain = Domain::synthetic;
    ContentLatent content;
    StyleLatent style;
};

// Closed ranges for every style field of one domain. Supports of the two
// domains are disjoint in every field, which is what makes the domain gap
// a style gap and nothing else.
struct StyleRanges {
    int palette_lo = 0, palette_hi = 16;  // [lo, hi)
    std::vector<int> textures{0};
    double blur_lo = 0.0, blur_hi = 0.0;
    double noise_lo = 0.0, noise_hi = 0.0;
    double bright_lo = 0.0, bright_hi = 0.0;
    double contrast_lo = 1.0, contrast_hi = 1.0;
    double hue_lo = 0.0, hue_hi = 0.0;
};

struct DatasetSpec {
    int n_classes = 6;   // families 0..n_classes-1 are drawn; 12 available
    int height = 32;
    int width = 32;
    std::uint64_t master_seed = 1;
    StyleRanges syn;   // clean renders: flat palette, no blur/noise
    StyleRanges real;  // textured, blurred, noisy, muted palette

    static DatasetSpec defaults() {
        DatasetSpec s;
        s.syn = StyleRanges{};  // all degenerate ranges: the clean domain
        s.real.palette_lo = 16;
        s.real.palette_hi = 32;
        s.real.textures = {1, 2, 3};
        s.real.blur_lo = 0.4;
        s.real.blur_hi = 1.2;
        s.real.noise_lo = 0.02;
        s.real.noise_hi = 0.08;
        s.real.bright_lo = 0.03;
        s.real.bright_hi = 0.12;
        s.real.contrast_lo = 0.75;
        s.real.contrast_hi = 0.95;
        s.real.hue_lo = 0.04;
        s.real.hue_hi = 0.12;
        return s;
    }
};

constexpr int kFamilyCount = 12;

// ============================================================================
// spec file form (same INI dialect as run configs)
// ============================================================================

namespace detail {

inline std::string fmt_int_list(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(v[i]);
    }
    return s;
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ','))
        out.push_back(static_cast<int>(gcisg::detail::parse_int(key, gcisg::detail::trim(item))));
    if (out.empty()) throw ConfigError("config key '" + key + "': expected at least one value");
    return out;
}

inline void style_kv(std::map<std::string, std::string>& kv, const std::string& prefix,
                     const StyleRanges& s) {
    using gcisg::detail::fmt_double;
    kv[prefix + ".palette_lo"] = std::to_string(s.palette_lo);
    kv[prefix + ".palette_hi"] = std::to_string(s.palette_hi);
    kv[prefix + ".textures"] = fmt_int_list(s.textures);
    kv[prefix + ".blur_lo"] = fmt_double(s.blur_lo);
    kv[prefix + ".blur_hi"] = fmt_double(s.blur_hi);
    kv[prefix + ".noise_lo"] = fmt_double(s.noise_lo);
    kv[prefix + ".noise_hi"] = fmt_double(s.noise_hi);
    kv[prefix + ".bright_lo"] = fmt_double(s.bright_lo);
    kv[prefix + ".bright_hi"] = fmt_double(s.bright_hi);
    kv[prefix + ".contrast_lo"] = fmt_double(s.contrast_lo);
    kv[prefix + ".contrast_hi"] = fmt_double(s.contrast_hi);
    kv[prefix + ".hue_lo"] = fmt_double(s.hue_lo);
    kv[prefix + ".hue_hi"] = fmt_double(s.hue_hi);
}

inline bool style_set(StyleRanges& s, const std::string& key, const std::string& sub,
                      const std::string& value) {
    using gcisg::detail::parse_double;
    using gcisg::detail::parse_int;
    if (sub == "palette_lo") s.palette_lo = static_cast<int>(parse_int(key, value));
    else if (sub == "palette_hi") s.palette_hi = static_cast<int>(parse_int(key, value));
    else if (sub == "textures") s.textures = parse_int_list(key, value);
    else if (sub == "blur_lo") s.blur_lo = parse_double(key, value);
    else if (sub == "blur_hi") s.blur_hi = parse_double(key, value);
    else if (sub == "noise_lo") s.noise_lo = parse_double(key, value);
    else if (sub == "noise_hi") s.noise_hi = parse_double(key, value);
    else if (sub == "bright_lo") s.bright_lo = parse_double(key, value);
    else if (sub == "bright_hi") s.bright_hi = parse_double(key, value);
    else if (sub == "contrast_lo") s.contrast_lo = parse_double(key, value);
    else if (sub == "contrast_hi") s.contrast_hi = parse_double(key, value);
    else if (sub == "hue_lo") s.hue_lo = parse_double(key, value);
    else if (sub == "hue_hi") s.hue_hi = parse_double(key, value);
    else return false;
    return true;
}

}  // namespace detail

inline std::map<std::string, std::string> spec_to_kv(const DatasetSpec& s) {
    std::map<std::string, std::string> kv;
    kv["data.classes"] = std::to_string(s.n_classes);
    kv["data.height"] = std::to_string(s.height);
    kv["data.width"] = std::to_string(s.width);
    kv["data.seed"] = std::to_string(s.master_seed);
    detail::style_kv(kv, "syn", s.syn);
    detail::style_kv(kv, "real", s.real);
    return kv;
}

inline void spec_set(DatasetSpec& s, const std::string& key, const std::string& value) {
    using gcisg::detail::parse_int;
    using gcisg::detail::parse_u64;
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    const std::string sub = dot == std::string::npos ? "" : key.substr(dot + 1);
    if (sec == "data") {
        if (sub == "classes") s.n_classes = static_cast<int>(parse_int(key, value));
        else if (sub == "height") s.height = static_cast<int>(parse_int(key, value));
        else if (sub == "width") s.width = static_cast<int>(parse_int(key, value));
        else if (sub == "seed") s.master_seed = parse_u64(key, value);
        else throw ConfigError("unknown dataset spec key '" + key + "'");
        return;
    }
    if (sec == "syn" && detail::style_set(s.syn, key, sub, value)) return;
    if (sec == "real" && detail::style_set(s.real, key, sub, value)) return;
    throw ConfigError("unknown dataset spec key '" + key + "'");
}

inline void validate_spec(const DatasetSpec& s) {
    if (s.n_classes < 2 || s.n_classes > kFamilyCount)
        throw ConfigError("data.classes must be in [2, " + std::to_string(kFamilyCount) + "]");
    if (s.height < 16 || s.width < 16)
        throw ConfigError("data.height and data.width must be >= 16");
    for (const auto* st : {&s.syn, &s.real}) {
        if (st->palette_lo < 0 || st->palette_hi <= st->palette_lo)
            throw ConfigError("palette range must satisfy 0 <= lo < hi");
        if (st->textures.empty()) throw ConfigError("textures list must be non-empty");
    }
}

inline void write_dataset_spec(std::ostream& os, const DatasetSpec& s) {
    gcisg::detail::write_ini(os, spec_to_kv(s));
}

inline void read_dataset_spec_into(std::istream& is, DatasetSpec& s) {
    gcisg::detail::parse_ini(is, [&](const std::string& key, const std::string& value) {
        spec_set(s, key, value);
    });
}

inline DatasetSpec load_dataset_spec(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open dataset spec: " + path);
    DatasetSpec s = DatasetSpec::defaults();
    read_dataset_spec_into(is, s);
    validate_spec(s);
    return s;
}

// ============================================================================
// color helpers (all operate on raw [0,1] doubles)
// ============================================================================

namespace imageops {

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    v = mx;
    const double d = mx - mn;
    s = mx <= 0.0 ? 0.0 : d / mx;
    if (d <= 0.0) {
        h = 0.0;
        return;
    }
    if (mx == r) h = std::fmod((g - b) / d, 6.0);
    else if (mx == g) h = (b - r) / d + 2.0;
    else h = (r - g) / d + 4.0;
    h /= 6.0;
    if (h < 0.0) h += 1.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    h = h - std::floor(h);
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r1 = 0, g1 = 0, b1 = 0;
    if (hp < 1) { r1 = c; g1 = x; }
    else if (hp < 2) { r1 = x; g1 = c; }
    else if (hp < 3) { g1 = c; b1 = x; }
    else if (hp < 4) { g1 = x; b1 = c; }
    else if (hp < 5) { r1 = x; b1 = c; }
    else { r1 = c; b1 = x; }
    const double m = v - c;
    r = r1 + m;
    g = g1 + m;
    b = b1 + m;
}

struct Rgb {
    double r = 0, g = 0, b = 0;
};

inline Rgb shift_hue(const Rgb& c, double dh) {
    if (dh == 0.0) return c;
    double h, s, v;
    rgb_to_hsv(c.r, c.g, c.b, h, s, v);
    Rgb out;
    hsv_to_rgb(h + dh, s, v, out.r, out.g, out.b);
    return out;
}

inline double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

// In-place separable Gaussian blur with replicated edges; sigma 0 is a no-op.
inline void gaussian_blur(std::vector<double>& img, int channels, int h, int w, double sigma) {
    if (sigma <= 0.0) return;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        ksum += k[i + radius];
    }
    for (auto& v : k) v /= ksum;
    std::vector<double> tmp(img.size());
    for (int c = 0; c < channels; ++c) {
        const std::size_t base = static_cast<std::size_t>(c) * h * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double s = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int xx = std::clamp(x + i, 0, w - 1);
                    s += k[i + radius] * img[base + y * w + xx];
                }
                tmp[base + y * w + x] = s;
            }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double s = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int yy = std::clamp(y + i, 0, h - 1);
                    s += k[i + radius] * tmp[base + yy * w + x];
                }
                img[base + y * w + x] = s;
            }
    }
}

}  // namespace imageops

// ============================================================================
// silhouette families
// ============================================================================

namespace detail {

// Membership of local coordinates (qx,qy) in family f; the shape fits the
// unit disk. Families 0..5 are the task classes; 6..11 only appear in the
// 12-way reference pretext data.
inline bool family_member(int f, double qx, double qy) {
    const double r = std::hypot(qx, qy);
    switch (f) {
        case 0:  // disk
            return r <= 1.0;
        case 1:  // annulus
            return r <= 1.0 && r >= 0.55;
        case 2: {  // equilateral triangle, one vertex up
            if (r > 1.0) return false;
            // vertices at 90, 210, 330 degrees; inside = on the inner side of
            // each edge
            const double k = 0.5;  // sin(30 deg): inradius of the unit triangle
            if (qy < -k) return false;
            if (0.8660254037844386 * qx + 0.5 * qy > k) return false;
            if (-0.8660254037844386 * qx + 0.5 * qy > k) return false;
            return true;
        }
        case 3:  // cross
            return (std::abs(qx) <= 0.33 && std::abs(qy) <= 1.0) ||
                   (std::abs(qy) <= 0.33 && std::abs(qx) <= 1.0);
        case 4:  // bar pair
            return std::abs(qy) <= 0.9 && std::abs(qx) >= 0.3 && std::abs(qx) <= 0.75;
        case 5:  // two opposite filled quadrants
            return std::abs(qx) <= 1.0 && std::abs(qy) <= 1.0 && (qx > 0.0) != (qy > 0.0);
        case 6:  // ring with center dot
            return r <= 0.35 || (r >= 0.7 && r <= 1.0);
        case 7:  // square
            return std::abs(qx) <= 0.85 && std::abs(qy) <= 0.85;
        case 8:  // three dots in a row
            return std::hypot(qx + 0.7, qy) <= 0.28 || std::hypot(qx, qy) <= 0.28 ||
                   std::hypot(qx - 0.7, qy) <= 0.28;
        case 9:  // H shape
            return (std::abs(qx) >= 0.6 && std::abs(qx) <= 1.0 && std::abs(qy) <= 1.0) ||
                   (std::abs(qy) <= 0.2 && std::abs(qx) <= 1.0);
        case 10:  // corner bracket
            return (qx >= -1.0 && qx <= -0.5 && std::abs(qy) <= 1.0) ||
                   (qy >= 0.5 && qy <= 1.0 && std::abs(qx) <= 1.0);
        case 11:  // crescent
            return r <= 1.0 && std::hypot(qx - 0.45, qy) >= 0.75;
        default:
            throw ConfigError("silhouette family out of range: " + std::to_string(f));
    }
}

}  // namespace detail

// Anti-aliased silhouette coverage in [0,1] per pixel, 2x2 supersampled.
// Style never enters here: the mask is a pure function of content.
inline std::vector<double> render_mask(const ContentLatent& c, int h, int w) {
    std::vector<double> mask(static_cast<std::size_t>(h) * w, 0.0);
    const double cx = c.pos_x * w, cy = c.pos_y * h;
    const double half = 0.5 * c.scale * std::min(h, w);
    const double cosr = std::cos(c.rotation), sinr = std::sin(c.rotation);
    constexpr double sub[2] = {0.25, 0.75};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int hits = 0;
            for (double sy : sub)
                for (double sx : sub) {
                    const double dx = (x + sx - cx) / half;
                    const double dy = (y + sy - cy) / half;
                    const double qx = cosr * dx + sinr * dy;
                    const double qy = -sinr * dx + cosr * dy;
                    if (detail::family_member(c.class_id, qx, qy)) ++hits;
                }
            mask[static_cast<std::size_t>(y) * w + x] = hits / 4.0;
        }
    return mask;
}

// ============================================================================
// palettes and textures
// ============================================================================

namespace detail {

struct Palette {
    imageops::Rgb fg, bg, bg2;  // bg2 is the second background shade for textures
};

// Deterministic palette from its id. Ids below 16 are the synthetic book
// (vivid foreground on a dark flat ground); 16..31 the real book (muted
// colors, closer values). Value/saturation ranges do not overlap across the
// books, keeping the color statistics of the two domains disjoint.
inline Palette palette_colors(int palette_id) {
    auto u = [&](std::uint64_t salt, double lo, double hi) {
        return lo + (hi - lo) * (static_cast<double>(rng::mix({0x9a1e77eULL,
                                                               static_cast<std::uint64_t>(palette_id),
                                                               salt}) >>
                                 11) *
                                 0x1.0p-53);
    };
    Palette p;
    const bool syn = palette_id < 16;
    const double fg_h = u(1, 0.0, 1.0);
    const double bg_h = std::fmod(fg_h + u(2, 0.35, 0.65), 1.0);  // well-separated hues
    if (syn) {
        imageops::hsv_to_rgb(fg_h, u(3, 0.85, 1.0), u(4, 0.75, 0.95), p.fg.r, p.fg.g, p.fg.b);
        imageops::hsv_to_rgb(bg_h, u(5, 0.85, 1.0), u(6, 0.05, 0.20), p.bg.r, p.bg.g, p.bg.b);
        p.bg2 = p.bg;  // unused: synthetic backgrounds are flat
    } else {
        imageops::hsv_to_rgb(fg_h, u(3, 0.35, 0.60), u(4, 0.45, 0.70), p.fg.r, p.fg.g, p.fg.b);
        imageops::hsv_to_rgb(bg_h, u(5, 0.35, 0.60), u(6, 0.22, 0.42), p.bg.r, p.bg.g, p.bg.b);
        imageops::hsv_to_rgb(std::fmod(bg_h + u(7, 0.02, 0.08), 1.0), u(8, 0.35, 0.60),
                             u(9, 0.22, 0.42), p.bg2.r, p.bg2.g, p.bg2.b);
    }
    return p;
}

// Background color at a pixel. Texture 0 is flat; 1 checker, 2 diagonal
// stripes, 3 blocky value noise. Textures blend the two background shades,
// so they are a property the augmentation op list cannot fabricate.
inline imageops::Rgb background_at(const Palette& p, int texture_id, std::uint64_t phase, int x,
                                   int y) {
    switch (texture_id) {
        case 0:
            return p.bg;
        case 1: {
            const int cell = 4;
            const int ox = static_cast<int>(phase % 7), oy = static_cast<int>((phase / 7) % 7);
            const bool a = (((x + ox) / cell) + ((y + oy) / cell)) % 2 == 0;
            return a ? p.bg : p.bg2;
        }
        case 2: {
            const int period = 5;
            const int ox = static_cast<int>(phase % 11);
            const bool a = ((x + y + ox) / 2) % period < period / 2 + 1;
            return a ? p.bg : p.bg2;
        }
        case 3: {
            const int cell = 4;
            const double t = (rng::mix({phase, static_cast<std::uint64_t>(x / cell),
                                        static_cast<std::uint64_t>(y / cell)}) >>
                              11) *
                             0x1.0p-53;
            imageops::Rgb out;
            out.r = p.bg.r + t * (p.bg2.r - p.bg.r);
            out.g = p.bg.g + t * (p.bg2.g - p.bg.g);
            out.b = p.bg.b + t * (p.bg2.b - p.bg.b);
            return out;
        }
        default:
            throw ConfigError("texture id out of range: " + std::to_string(texture_id));
    }
}

}  // namespace detail

// ============================================================================
// rendering
// ============================================================================

// Deterministic image from latents: composite the content mask over the
// styled background, then photometric adjustments, blur, and noise.
inline Tensor render(const ContentLatent& content, const StyleLatent& style, int h, int w) {
    const detail::Palette pal = detail::palette_colors(style.palette_id);
    const imageops::Rgb fg = imageops::shift_hue(pal.fg, style.hue_shift);
    const std::vector<double> mask = render_mask(content, h, w);

    std::vector<double> img(3 * static_cast<std::size_t>(h) * w);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::uint64_t phase = rng::mix({style.noise_seed, 0x7e47u});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            imageops::Rgb bg =
                detail::background_at(pal, style.texture_id, phase, x, y);
            bg = imageops::shift_hue(bg, style.hue_shift);
            const double a = mask[i];
            img[0 * plane + i] = a * fg.r + (1.0 - a) * bg.r;
            img[1 * plane + i] = a * fg.g + (1.0 - a) * bg.g;
            img[2 * plane + i] = a * fg.b + (1.0 - a) * bg.b;
        }

    if (style.contrast != 1.0 || style.brightness != 0.0)
        for (auto& v : img) v = (v - 0.5) * style.contrast + 0.5 + style.brightness;

    imageops::gaussian_blur(img, 3, h, w, style.blur_sigma);

    if (style.noise_sigma > 0.0) {
        auto eng = rng::engine({style.noise_seed, 0x401eu});
        for (auto& v : img) v += rng::normal(eng, 0.0, style.noise_sigma);
    }
    for (auto& v : img) v = imageops::clamp01(v);
    return Tensor::from_data({3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)},
                             std::move(img));
}

// ============================================================================
// split generation
// ============================================================================

namespace detail {

inline ContentLatent draw_content(std::mt19937_64& eng, int n_classes, std::size_t index) {
    ContentLatent c;
    c.class_id = static_cast<int>(index % static_cast<std::size_t>(n_classes));
    c.pos_x = rng::uniform(eng, 0.38, 0.62);
    c.pos_y = rng::uniform(eng, 0.38, 0.62);
    c.scale = rng::uniform(eng, 0.3, 0.7);
    c.rotation = rng::uniform(eng, 0.0, 2.0 * std::numbers::pi);
    return c;
}

inline StyleLatent draw_style(std::mt19937_64& eng, const StyleRanges& r) {
    StyleLatent s;
    s.palette_id = r.palette_lo + static_cast<int>(rng::uniform_int(
                                      eng, static_cast<std::uint64_t>(r.palette_hi - r.palette_lo)));
    s.texture_id = r.textures[rng::uniform_int(eng, r.textures.size())];
    s.blur_sigma = rng::uniform(eng, r.blur_lo, r.blur_hi);
    s.noise_sigma = rng::uniform(eng, r.noise_lo, r.noise_hi);
    s.brightness = rng::uniform(eng, r.bright_lo, r.bright_hi);
    s.contrast = rng::uniform(eng, r.contrast_lo, r.contrast_hi);
    s.hue_shift = rng::uniform(eng, r.hue_lo, r.hue_hi);
    s.noise_seed = eng();
    return s;
}

}  // namespace detail

// Content latents are a function of (seed, index) only, so splits of both
// domains drawn with one seed are pairwise content-matched; style is a
// function of (seed, domain, index).
inline std::vector<Sample> generate_split(const DatasetSpec& spec, Domain domain, std::size_t n,
                                          std::uint64_t seed) {
    if (n < 1) throw ConfigError("generate_split: n must be >= 1");
    if (spec.n_classes < 1 || spec.n_classes > kFamilyCount)
        throw ConfigError("generate_split: n_classes out of range");
    const StyleRanges& ranges = domain == Domain::synthetic ? spec.syn : spec.real;
    const std::uint64_t domain_id = domain == Domain::synthetic ? 1 : 2;
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto content_eng = rng::engine({seed, 0xC0DEu, i});
        auto style_eng = rng::engine({seed, 0x57e1u, domain_id, i});
        Sample s;
        s.content = detail::draw_content(content_eng, spec.n_classes, i);
        s.style = detail::draw_style(style_eng, ranges);
        s.label = s.content.class_id;
        s.domain = domain;
        s.image = render(s.content, s.style, spec.height, spec.width);
        out.push_back(std::move(s));
    }
    return out;
}

// ============================================================================
// strong augmentation (the RandAugment stand-in)
// ============================================================================

constexpr int kAugmentOpCount = 10;

namespace detail {

// Applies augmentation op `op` at magnitude fraction f = M/30 in [0,1].
// Every op is the identity at f == 0.
inline void apply_augment_op(std::vector<double>& img, int h, int w, int op, double f,
                             std::mt19937_64& eng) {
    if (op < 0 || op >= kAugmentOpCount)
        throw ConfigError("augment op out of range: " + std::to_string(op));
    if (f == 0.0) return;  // exact identity, no rounding residue
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    auto sign = [&] { return rng::uniform_int(eng, 2) == 0 ? -1.0 : 1.0; };
    switch (op) {
        case 0: {  // hue shift
            const double dh = sign() * 0.25 * f;
            if (dh == 0.0) return;
            for (std::size_t i = 0; i < plane; ++i) {
                imageops::Rgb c{img[i], img[plane + i], img[2 * plane + i]};
                c = imageops::shift_hue(c, dh);
                img[i] = c.r;
                img[plane + i] = c.g;
                img[2 * plane + i] = c.b;
            }
            return;
        }
        case 1: {  // saturation
            const double scale = 1.0 + sign() * 0.9 * f;
            for (std::size_t i = 0; i < plane; ++i) {
                const double gray =
                    (img[i] + img[plane + i] + img[2 * plane + i]) / 3.0;
                for (int c = 0; c < 3; ++c) {
                    double& v = img[c * plane + i];
                    v = imageops::clamp01(gray + (v - gray) * scale);
                }
            }
            return;
        }
        case 2: {  // brightness
            const double d = sign() * 0.4 * f;
            for (auto& v : img) v = imageops::clamp01(v + d);
            return;
        }
        case 3: {  // contrast
            const double scale = 1.0 + sign() * 0.6 * f;
            for (auto& v : img) v = imageops::clamp01((v - 0.5) * scale + 0.5);
            return;
        }
        case 4:  // gaussian blur
            imageops::gaussian_blur(img, 3, h, w, 1.2 * f);
            return;
        case 5: {  // sharpen: unsharp mask
            if (f == 0.0) return;
            std::vector<double> blurred = img;
            imageops::gaussian_blur(blurred, 3, h, w, 1.0);
            const double amount = 1.5 * f;
            for (std::size_t i = 0; i < img.size(); ++i)
                img[i] = imageops::clamp01(img[i] + amount * (img[i] - blurred[i]));
            return;
        }
        case 6: {  // posterize
            if (f == 0.0) return;
            const int levels = std::max(2, static_cast<int>(std::lround(32.0 - 28.0 * f)));
            const double q = static_cast<double>(levels - 1);
            for (auto& v : img) v = std::round(v * q) / q;
            return;
        }
        case 7: {  // solarize: invert above threshold
            const double threshold = 1.0 - 0.9 * f;
            for (auto& v : img)
                if (v > threshold) v = 1.0 - v;
            return;
        }
        case 8: {  // small translate + rotate, nearest neighbor
            const double angle = sign() * (15.0 * std::numbers::pi / 180.0) * f;
            const int dx = static_cast<int>(std::lround(sign() * 3.0 * f));
            const int dy = static_cast<int>(std::lround(sign() * 3.0 * f));
            if (angle == 0.0 && dx == 0 && dy == 0) return;
            const double cosr = std::cos(angle), sinr = std::sin(angle);
            const double cx = 0.5 * w, cy = 0.5 * h;
            std::vector<double> src = img;
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const double rx = x + 0.5 - cx, ry = y + 0.5 - cy;
                    const int sx = std::clamp(
                        static_cast<int>(std::floor(cosr * rx + sinr * ry + cx)) - dx, 0, w - 1);
                    const int sy = std::clamp(
                        static_cast<int>(std::floor(-sinr * rx + cosr * ry + cy)) - dy, 0, h - 1);
                    for (int c = 0; c < 3; ++c)
                        img[c * plane + static_cast<std::size_t>(y) * w + x] =
                            src[c * plane + static_cast<std::size_t>(sy) * w + sx];
                }
            return;
        }
        case 9: {  // cutout: gray square
            const int side = static_cast<int>(std::lround(10.0 * f));
            if (side == 0) return;
            const int x0 = static_cast<int>(rng::uniform_int(eng, static_cast<std::uint64_t>(w)));
            const int y0 = static_cast<int>(rng::uniform_int(eng, static_cast<std::uint64_t>(h)));
            for (int y = y0; y < std::min(h, y0 + side); ++y)
                for (int x = x0; x < std::min(w, x0 + side); ++x)
                    for (int c = 0; c < 3; ++c)
                        img[c * plane + static_cast<std::size_t>(y) * w + x] = 0.5;
            return;
        }
        default:
            return;  // unreachable; range checked above
    }
}

}  // namespace detail

// Two ops sampled (with replacement) from the 10-op list, both applied at
// magnitude M of 30. Deterministic in seed; M = 0 returns the input exactly.
inline Tensor strong_augment(const Tensor& image, std::uint64_t seed, double magnitude = 9.0) {
    if (image.rank() != 3 || image.shape()[0] != 3)
        throw ShapeError("strong_augment: expected [3,H,W], got " + shape_str(image.shape()));
    const int h = static_cast<int>(image.shape()[1]);
    const int w = static_cast<int>(image.shape()[2]);
    const double f = std::clamp(magnitude / 30.0, 0.0, 1.0);
    auto eng = rng::engine({seed, 0xau});
    std::vector<double> img(image.data().begin(), image.data().end());
    for (int k = 0; k < 2; ++k) {
        const int op = static_cast<int>(rng::uniform_int(eng, kAugmentOpCount));
        detail::apply_augment_op(img, h, w, op, f, eng);
    }
    return Tensor::from_data(image.shape(), std::move(img));
}

// Photometric-only perturbation for the match-rate metric: Gaussian blur plus
// brightness/contrast/saturation/hue jitter. Geometry is untouched. strength
// scales every parameter; strength 0 is the identity.
inline Tensor stylize_for_matchrate(const Tensor& image, std::uint64_t seed,
                                    double strength = 1.0) {
    if (image.rank() != 3 || image.shape()[0] != 3)
        throw ShapeError("stylize_for_matchrate: expected [3,H,W], got " +
                         shape_str(image.shape()));
    const int h = static_cast<int>(image.shape()[1]);
    const int w = static_cast<int>(image.shape()[2]);
    auto eng = rng::engine({seed, 0x5741u});
    std::vector<double> img(image.data().begin(), image.data().end());
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    if (strength == 0.0)  // exact identity, no rounding residue
        return Tensor::from_data(image.shape(), std::move(img));

    const double sigma = strength * rng::uniform(eng, 0.5, 1.5);
    const double dh = strength * rng::uniform(eng, -0.3, 0.3);
    const double db = strength * rng::uniform(eng, -0.3, 0.3);
    const double dc = 1.0 + strength * rng::uniform(eng, -0.3, 0.3);
    const double ds = 1.0 + strength * rng::uniform(eng, -0.3, 0.3);

    imageops::gaussian_blur(img, 3, h, w, sigma);
    for (std::size_t i = 0; i < plane; ++i) {
        imageops::Rgb c{img[i], img[plane + i], img[2 * plane + i]};
        if (dh != 0.0) c = imageops::shift_hue(c, dh);
        const double gray = (c.r + c.g + c.b) / 3.0;
        c.r = gray + (c.r - gray) * ds;
        c.g = gray + (c.g - gray) * ds;
        c.b = gray + (c.b - gray) * ds;
        img[i] = imageops::clamp01((c.r - 0.5) * dc + 0.5 + db);
        img[plane + i] = imageops::clamp01((c.g - 0.5) * dc + 0.5 + db);
        img[2 * plane + i] = imageops::clamp01((c.b - 0.5) * dc + 0.5 + db);
    }
    return Tensor::from_data(image.shape(), std::move(img));
}

// ============================================================================
// dataset packing and export
// ============================================================================

struct DataSet {
    Tensor images;            // [N,3,H,W]
    std::vector<int> labels;  // length N
    Domain domain = Domain::synthetic;
    std::size_t size() const { return labels.size(); }
    Tensor image(std::size_t i) const {
        const Shape& s = images.shape();
        return reshape(slice(images, 0, i, 1), {s[1], s[2], s[3]});
    }
};

inline DataSet pack_samples(const std::vector<Sample>& samples) {
    if (samples.empty()) throw ConfigError("pack_samples: empty sample list");
    const Shape& s = samples[0].image.shape();
    DataSet d;
    d.domain = samples[0].domain;
    std::vector<double> data;
    data.reserve(samples.size() * shape_numel(s));
    for (const auto& smp : samples) {
        if (smp.image.shape() != s)
            throw ShapeError("pack_samples: inconsistent image shapes");
        if (smp.domain != d.domain)
            throw ConfigError("pack_samples: mixed-domain sample list");
        data.insert(data.end(), smp.image.data().begin(), smp.image.data().end());
        d.labels.push_back(smp.label);
    }
    d.images = Tensor::from_data({samples.size(), s[0], s[1], s[2]}, std::move(data));
    return d;
}

inline void save_dataset(const std::string& dir, const std::string& name, const DataSet& d) {
    save_tensor(dir + "/" + name + "_images.gtsr", d.images);
    std::vector<double> lab(d.labels.begin(), d.labels.end());
    save_tensor(dir + "/" + name + "_labels.gtsr",
                Tensor::from_data({d.labels.size()}, std::move(lab)));
    save_tensor(dir + "/" + name + "_domain.gtsr",
                Tensor::from_data({1}, {d.domain == Domain::synthetic ? 0.0 : 1.0}));
}

inline DataSet load_dataset(const std::string& dir, const std::string& name) {
    DataSet d;
    d.images = load_tensor(dir + "/" + name + "_images.gtsr");
    Tensor lab = load_tensor(dir + "/" + name + "_labels.gtsr");
    if (d.images.rank() != 4 || lab.rank() != 1 || lab.shape()[0] != d.images.shape()[0])
        throw IoError("dataset '" + name + "' is malformed");
    d.labels.reserve(lab.numel());
    for (double v : lab.data()) d.labels.push_back(static_cast<int>(v));
    Tensor dom = load_tensor(dir + "/" + name + "_domain.gtsr");
    d.domain = dom.data()[0] == 0.0 ? Domain::synthetic : Domain::real_world;
    return d;
}

}  // namespace gcisg
