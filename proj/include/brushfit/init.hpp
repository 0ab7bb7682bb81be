#pragma once

// Stroke initialization: SLIC superpixels mapped to strokes, or seeded random.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "canvas.hpp"
#include "error.hpp"
#include "geometry.hpp"

namespace brushfit {

struct Lab {
    double l = 0.0;
    double a = 0.0;
    double b = 0.0;
};

/// sRGB in [0,1] to CIELAB (D65 white point).
inline Lab rgb_to_lab(const Rgb& rgb) {
    auto linear = [](double c) { return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4); };
    const double r = linear(rgb.r), g = linear(rgb.g), b = linear(rgb.b);
    const double x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
    const double y = (0.2126729 * r + 0.7151522 * g + 0.0721750 * b) / 1.00000;
    const double z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
    auto f = [](double t) {
        constexpr double eps = 216.0 / 24389.0, kappa = 24389.0 / 27.0;
        return t > eps ? std::cbrt(t) : (kappa * t + 16.0) / 116.0;
    };
    const double fx = f(x), fy = f(y), fz = f(z);
    return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

struct Superpixel {
    std::vector<std::uint32_t> members;  // flat pixel indices y * W + x
    Vec2 centroid;
    Rgb mean_color;
    Vec2 principal_axis{0.0, 1.0};  // unit
    double axis_variance = 0.0;     // variance of member coordinates along the axis
    std::size_t area() const { return members.size(); }
};

struct SlicResult {
    std::vector<Superpixel> superpixels;
    std::vector<std::int32_t> labels;  // per pixel, index into superpixels
    int height = 0;
    int width = 0;
};

namespace detail {

// Exactly k seeds on a near-square grid: `rows` rows, row r holds a share of k.
inline std::vector<Vec2> slic_seeds(int h, int w, int k) {
    const int rows = std::clamp(static_cast<int>(std::lround(std::sqrt(static_cast<double>(k) * h / w))), 1, std::min(k, h));
    std::vector<Vec2> seeds;
    seeds.reserve(static_cast<std::size_t>(k));
    for (int r = 0; r < rows; ++r) {
        const int count = static_cast<int>(static_cast<long long>(k) * (r + 1) / rows - static_cast<long long>(k) * r / rows);
        const double y = (r + 0.5) * h / rows - 0.5;
        for (int c = 0; c < count; ++c) seeds.push_back({y, (c + 0.5) * w / count - 0.5});
    }
    return seeds;
}

struct Center {
    double l, a, b, y, x;
};

// Summarizes member pixels into centroid, mean color and principal axis.
inline void describe(Superpixel& sp, const Canvas& image) {
    const int w = image.width();
    double sy = 0, sx = 0;
    Rgb color;
    for (auto p : sp.members) {
        const int y = static_cast<int>(p / w), x = static_cast<int>(p % w);
        sy += y;
        sx += x;
        for (std::size_t c = 0; c < 3; ++c) color[c] += image.at(y, x, static_cast<int>(c));
    }
    const double n = static_cast<double>(sp.members.size());
    sp.centroid = {sy / n, sx / n};
    for (std::size_t c = 0; c < 3; ++c) color[c] /= n;
    sp.mean_color = color;

    double cyy = 0, cxx = 0, cyx = 0;
    for (auto p : sp.members) {
        const double dy = static_cast<double>(p / w) - sp.centroid.y;
        const double dx = static_cast<double>(p % w) - sp.centroid.x;
        cyy += dy * dy;
        cxx += dx * dx;
        cyx += dy * dx;
    }
    cyy /= n;
    cxx /= n;
    cyx /= n;
    // Largest eigenpair of [[cyy, cyx], [cyx, cxx]].
    const double tr = cyy + cxx, det = cyy * cxx - cyx * cyx;
    const double disc = std::sqrt(std::max(0.0, tr * tr / 4.0 - det));
    const double lambda = tr / 2.0 + disc;
    Vec2 axis;
    if (std::abs(cyx) > 1e-12) axis = {lambda - cxx, cyx};
    else axis = cyy >= cxx ? Vec2{1.0, 0.0} : Vec2{0.0, 1.0};
    const double len = norm(axis);
    sp.principal_axis = len > 0 ? axis * (1.0 / len) : Vec2{0.0, 1.0};
    sp.axis_variance = std::max(0.0, lambda);
}

} // namespace detail

/// SLIC superpixels: k-means over (L, a, b, y, x) with each center searching
/// a 2S x 2S window, S = sqrt(H*W / k). D^2 = d_lab^2 + (d_xy / S)^2 m^2.
inline SlicResult slic(const Canvas& image, int k, double compactness = 10.0, int iters = 10) {
    const int h = image.height(), w = image.width();
    const std::size_t npix = image.pixel_count();
    if (k < 1) throw ConfigError("slic: k must be >= 1");
    if (iters < 1) throw ConfigError("slic: iters must be >= 1");
    if (static_cast<std::size_t>(k) > npix) throw ConfigError("slic: k exceeds the pixel count");
    if (!(compactness > 0.0)) throw ConfigError("slic: compactness must be > 0");

    std::vector<Lab> lab(npix);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) lab[static_cast<std::size_t>(y) * w + x] = rgb_to_lab(image.pixel(y, x));
    auto lab_at = [&](int y, int x) -> const Lab& { return lab[static_cast<std::size_t>(y) * w + x]; };

    const double step = std::sqrt(static_cast<double>(npix) / k);
    std::vector<detail::Center> centers;
    auto gradient = [&](int y, int x) {
        if (y < 1 || y >= h - 1 || x < 1 || x >= w - 1) return std::numeric_limits<double>::infinity();
        auto d2 = [](const Lab& p, const Lab& q) {
            return (p.l - q.l) * (p.l - q.l) + (p.a - q.a) * (p.a - q.a) + (p.b - q.b) * (p.b - q.b);
        };
        return d2(lab_at(y + 1, x), lab_at(y - 1, x)) + d2(lab_at(y, x + 1), lab_at(y, x - 1));
    };
    for (const auto& s : detail::slic_seeds(h, w, k)) {
        const int cy = std::clamp(static_cast<int>(std::lround(s.y)), 0, h - 1);
        const int cx = std::clamp(static_cast<int>(std::lround(s.x)), 0, w - 1);
        // Move the seed off edges: lowest gradient in its 3x3 neighborhood,
        // only if strictly lower than at the seed itself.
        double best = gradient(cy, cx);
        int by = cy, bx = cx;
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const double g = gradient(cy + dy, cx + dx);
                if (g < best) {
                    best = g;
                    by = cy + dy;
                    bx = cx + dx;
                }
            }
        const Lab& c = lab_at(by, bx);
        if (by == cy && bx == cx) centers.push_back({c.l, c.a, c.b, s.y, s.x});
        else centers.push_back({c.l, c.a, c.b, static_cast<double>(by), static_cast<double>(bx)});
    }

    const double spatial = (compactness / step) * (compactness / step);
    auto dist2 = [&](const detail::Center& c, int y, int x) {
        const Lab& p = lab_at(y, x);
        const double dl = p.l - c.l, da = p.a - c.a, db = p.b - c.b;
        const double dy = y - c.y, dx = x - c.x;
        return dl * dl + da * da + db * db + (dy * dy + dx * dx) * spatial;
    };

    std::vector<std::int32_t> labels(npix, -1);
    std::vector<double> best(npix);
    const int radius = static_cast<int>(std::ceil(step));
    for (int it = 0; it < iters; ++it) {
        std::fill(labels.begin(), labels.end(), -1);
        std::fill(best.begin(), best.end(), std::numeric_limits<double>::infinity());
        for (std::size_t ci = 0; ci < centers.size(); ++ci) {
            const auto& c = centers[ci];
            const int y0 = std::max(0, static_cast<int>(std::floor(c.y)) - radius);
            const int y1 = std::min(h - 1, static_cast<int>(std::ceil(c.y)) + radius);
            const int x0 = std::max(0, static_cast<int>(std::floor(c.x)) - radius);
            const int x1 = std::min(w - 1, static_cast<int>(std::ceil(c.x)) + radius);
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    const double d = dist2(c, y, x);
                    const std::size_t p = static_cast<std::size_t>(y) * w + x;
                    if (d < best[p]) {
                        best[p] = d;
                        labels[p] = static_cast<std::int32_t>(ci);
                    }
                }
        }
        // Pixels outside every window go to the globally nearest center.
        for (std::size_t p = 0; p < npix; ++p) {
            if (labels[p] >= 0) continue;
            const int y = static_cast<int>(p / w), x = static_cast<int>(p % w);
            for (std::size_t ci = 0; ci < centers.size(); ++ci) {
                const double d = dist2(centers[ci], y, x);
                if (d < best[p]) {
                    best[p] = d;
                    labels[p] = static_cast<std::int32_t>(ci);
                }
            }
        }
        std::vector<std::array<double, 6>> acc(centers.size(), {0, 0, 0, 0, 0, 0});
        for (std::size_t p = 0; p < npix; ++p) {
            const auto& l = lab[p];
            auto& a = acc[static_cast<std::size_t>(labels[p])];
            a[0] += l.l;
            a[1] += l.a;
            a[2] += l.b;
            a[3] += static_cast<double>(p / w);
            a[4] += static_cast<double>(p % w);
            a[5] += 1.0;
        }
        for (std::size_t ci = 0; ci < centers.size(); ++ci) {
            const auto& a = acc[ci];
            if (a[5] == 0.0) continue;
            centers[ci] = {a[0] / a[5], a[1] / a[5], a[2] / a[5], a[3] / a[5], a[4] / a[5]};
        }
    }

    // Compact labels, dropping empty clusters.
    SlicResult result;
    result.height = h;
    result.width = w;
    std::vector<std::int32_t> remap(centers.size(), -1);
    std::vector<Superpixel> sps;
    for (std::size_t p = 0; p < npix; ++p) {
        auto& r = remap[static_cast<std::size_t>(labels[p])];
        if (r < 0) {
            r = static_cast<std::int32_t>(sps.size());
            sps.emplace_back();
        }
        sps[static_cast<std::size_t>(r)].members.push_back(static_cast<std::uint32_t>(p));
    }
    // Keep superpixels ordered by their original center index.
    std::vector<std::int32_t> order;
    for (std::size_t ci = 0; ci < remap.size(); ++ci)
        if (remap[ci] >= 0) order.push_back(remap[ci]);
    std::vector<std::int32_t> final_id(sps.size());
    for (std::size_t i = 0; i < order.size(); ++i) final_id[static_cast<std::size_t>(order[i])] = static_cast<std::int32_t>(i);
    result.superpixels.resize(sps.size());
    for (std::size_t i = 0; i < sps.size(); ++i) result.superpixels[static_cast<std::size_t>(final_id[i])] = std::move(sps[i]);
    result.labels.resize(npix);
    for (std::size_t p = 0; p < npix; ++p) result.labels[p] = final_id[static_cast<std::size_t>(remap[static_cast<std::size_t>(labels[p])])];
    for (auto& sp : result.superpixels) detail::describe(sp, image);
    return result;
}

/// One stroke per superpixel: centered at the centroid, endpoints at
/// +-half the axis extent along the principal axis (a uniform segment of
/// length l has variance l^2 / 12), straight control point, width
/// width_factor * sqrt(area / pi), mean color.
inline StrokeSet strokes_from_superpixels(const std::vector<Superpixel>& sps, int canvas_h, int canvas_w,
                                          double width_factor = 1.0) {
    if (!(width_factor > 0.0)) throw ConfigError("width_factor must be > 0");
    StrokeSet set;
    set.canvas_h = canvas_h;
    set.canvas_w = canvas_w;
    set.strokes.reserve(sps.size());
    for (const auto& sp : sps) {
        Brushstroke s;
        s.location = sp.centroid;
        const double half = 0.5 * std::sqrt(12.0 * sp.axis_variance);
        s.p0_off = sp.principal_axis * (-half);
        s.p1_off = {0.0, 0.0};
        s.p2_off = sp.principal_axis * half;
        s.width = width_factor * std::sqrt(static_cast<double>(sp.area()) / std::numbers::pi);
        s.color = sp.mean_color;
        set.strokes.push_back(s);
    }
    clamp_strokes(set);
    return set;
}

/// n strokes at uniform locations with short random offsets
/// (|offset| <= 0.05 min(H, W)), widths in [1, 4], and colors read from
/// `target` at the rounded location.
inline StrokeSet random_init(int n, const Canvas& target, std::uint64_t seed) {
    if (n < 0) throw ConfigError("random_init: negative stroke count");
    const int h = target.height(), w = target.width();
    if (h <= 0 || w <= 0) throw DomainError("random_init: empty target");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double max_off = 0.05 * std::min(h, w);
    StrokeSet set;
    set.canvas_h = h;
    set.canvas_w = w;
    set.strokes.reserve(static_cast<std::size_t>(n));
    auto offset = [&] {
        const double r = max_off * unit(rng);
        const double a = 2.0 * std::numbers::pi * unit(rng);
        return Vec2{r * std::sin(a), r * std::cos(a)};
    };
    for (int i = 0; i < n; ++i) {
        Brushstroke s;
        s.location = {unit(rng) * (h - 1), unit(rng) * (w - 1)};
        s.p0_off = offset();
        s.p1_off = offset();
        s.p2_off = offset();
        s.width = 1.0 + 3.0 * unit(rng);
        const int ry = std::clamp(static_cast<int>(std::lround(s.location.y)), 0, h - 1);
        const int rx = std::clamp(static_cast<int>(std::lround(s.location.x)), 0, w - 1);
        s.color = target.pixel(ry, rx);
        set.strokes.push_back(s);
    }
    clamp_strokes(set);
    return set;
}

enum class InitMethod { Slic, Random };

struct InitOptions {
    InitMethod method = InitMethod::Slic;
    double width_factor = 1.0;
    double compactness = 10.0;
    int slic_iters = 10;
};

/// n strokes for `target`. SLIC uses k = n; when it yields fewer segments the
/// remainder comes from random_init.
inline StrokeSet initialize_strokes(const Canvas& target, int n, std::uint64_t seed, const InitOptions& opts = {}) {
    if (n < 0) throw ConfigError("stroke count must be >= 0");
    if (opts.method == InitMethod::Random || n == 0) return random_init(n, target, seed);
    const int k = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(n), target.pixel_count()));
    const auto seg = slic(target, k, opts.compactness, opts.slic_iters);
    auto set = strokes_from_superpixels(seg.superpixels, target.height(), target.width(), opts.width_factor);
    if (set.size() < static_cast<std::size_t>(n)) {
        const auto extra = random_init(n - static_cast<int>(set.size()), target, seed);
        set.strokes.insert(set.strokes.end(), extra.strokes.begin(), extra.strokes.end());
    }
    return set;
}

} // namespace brushfit
