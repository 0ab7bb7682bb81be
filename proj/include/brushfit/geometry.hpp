#pragma once

// Brushstroke domain types and quadratic Bezier sampling.
//
// Coordinates are (row, col) with the origin at the top-left pixel center;
// pixel (i, j) sits at the continuous point (i, j).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace brushfit {

struct Vec2 {
    double y = 0.0;
    double x = 0.0;

    constexpr Vec2& operator+=(const Vec2& o) { y += o.y; x += o.x; return *this; }
    constexpr Vec2& operator-=(const Vec2& o) { y -= o.y; x -= o.x; return *this; }
    constexpr Vec2& operator*=(double s) { y *= s; x *= s; return *this; }

    friend constexpr Vec2 operator+(Vec2 a, const Vec2& b) { return a += b; }
    friend constexpr Vec2 operator-(Vec2 a, const Vec2& b) { return a -= b; }
    friend constexpr Vec2 operator-(const Vec2& a) { return {-a.y, -a.x}; }
    friend constexpr Vec2 operator*(Vec2 a, double s) { return a *= s; }
    friend constexpr Vec2 operator*(double s, Vec2 a) { return a *= s; }
    friend constexpr bool operator==(const Vec2&, const Vec2&) = default;
};

constexpr double dot(const Vec2& a, const Vec2& b) { return a.y * b.y + a.x * b.x; }
inline double norm(const Vec2& a) { return std::hypot(a.y, a.x); }
inline double distance(const Vec2& a, const Vec2& b) { return norm(a - b); }

struct Rgb {
    double r = 0.0;
    double g = 0.0;
    double b = 0.0;

    constexpr double& operator[](std::size_t c) { return c == 0 ? r : (c == 1 ? g : b); }
    constexpr double operator[](std::size_t c) const { return c == 0 ? r : (c == 1 ? g : b); }
    friend constexpr bool operator==(const Rgb&, const Rgb&) = default;
};

/// A colored, width-carrying quadratic Bezier curve. Control points are
/// offsets from `location`, so translating a stroke moves one parameter.
struct Brushstroke {
    /// Number of scalar degrees of freedom per stroke.
    static constexpr std::size_t kParams = 12;

    Vec2 location;
    Vec2 p0_off;
    Vec2 p1_off;
    Vec2 p2_off;
    double width = 1.0;
    Rgb color;

    Vec2 p0() const { return location + p0_off; }
    Vec2 p1() const { return location + p1_off; }
    Vec2 p2() const { return location + p2_off; }

    /// End point minus start point. Derived, never stored.
    Vec2 orientation() const { return p2_off - p0_off; }

    friend bool operator==(const Brushstroke&, const Brushstroke&) = default;
};

/// Flat parameter layout of one stroke:
/// [loc.y, loc.x, p0.y, p0.x, p1.y, p1.x, p2.y, p2.x, width, r, g, b].
namespace param {
inline constexpr std::size_t kLocY = 0, kLocX = 1;
inline constexpr std::size_t kP0Y = 2, kP0X = 3;
inline constexpr std::size_t kP1Y = 4, kP1X = 5;
inline constexpr std::size_t kP2Y = 6, kP2X = 7;
inline constexpr std::size_t kWidth = 8;
inline constexpr std::size_t kRed = 9, kGreen = 10, kBlue = 11;
} // namespace param

inline std::array<double, Brushstroke::kParams> to_array(const Brushstroke& s) {
    return {s.location.y, s.location.x, s.p0_off.y, s.p0_off.x, s.p1_off.y, s.p1_off.x,
            s.p2_off.y,   s.p2_off.x,   s.width,    s.color.r,  s.color.g,  s.color.b};
}

inline Brushstroke from_array(std::span<const double, Brushstroke::kParams> a) {
    Brushstroke s;
    s.location = {a[0], a[1]};
    s.p0_off = {a[2], a[3]};
    s.p1_off = {a[4], a[5]};
    s.p2_off = {a[6], a[7]};
    s.width = a[8];
    s.color = {a[9], a[10], a[11]};
    return s;
}

/// Ordered strokes plus the canvas they live on. This is the optimization variable.
struct StrokeSet {
    std::vector<Brushstroke> strokes;
    int canvas_h = 0;
    int canvas_w = 0;

    std::size_t size() const { return strokes.size(); }
    bool empty() const { return strokes.empty(); }

    std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(strokes.size() * Brushstroke::kParams);
        for (const auto& s : strokes) {
            auto a = to_array(s);
            out.insert(out.end(), a.begin(), a.end());
        }
        return out;
    }

    void unflatten(std::span<const double> flat) {
        if (flat.size() != strokes.size() * Brushstroke::kParams)
            throw DomainError("unflatten: parameter vector has wrong length");
        for (std::size_t n = 0; n < strokes.size(); ++n)
            strokes[n] = from_array(flat.subspan(n * Brushstroke::kParams).first<Brushstroke::kParams>());
    }
};

/// Projection applied after every optimizer step: width into
/// [0.5, 0.25*min(H,W)], location into the canvas, color into [0,1].
struct ClampBounds {
    double min_width = 0.5;
    double max_width = 0.5;
    double max_row = 0.0;
    double max_col = 0.0;

    static ClampBounds for_canvas(int h, int w) {
        ClampBounds b;
        b.max_width = std::max(b.min_width, 0.25 * std::min(h, w));
        b.max_row = std::max(0, h - 1);
        b.max_col = std::max(0, w - 1);
        return b;
    }

    bool contains(const Brushstroke& s) const {
        auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
        return in(s.width, min_width, max_width) && in(s.location.y, 0.0, max_row) &&
               in(s.location.x, 0.0, max_col) && in(s.color.r, 0.0, 1.0) && in(s.color.g, 0.0, 1.0) &&
               in(s.color.b, 0.0, 1.0);
    }
};

inline void clamp_stroke(Brushstroke& s, const ClampBounds& b) {
    s.width = std::clamp(s.width, b.min_width, b.max_width);
    s.location.y = std::clamp(s.location.y, 0.0, b.max_row);
    s.location.x = std::clamp(s.location.x, 0.0, b.max_col);
    for (std::size_t c = 0; c < 3; ++c) s.color[c] = std::clamp(s.color[c], 0.0, 1.0);
}

inline void clamp_strokes(StrokeSet& set) {
    const auto bounds = ClampBounds::for_canvas(set.canvas_h, set.canvas_w);
    for (auto& s : set.strokes) clamp_stroke(s, bounds);
}

/// Bernstein weights of the quadratic Bezier at t: {(1-t)^2, 2(1-t)t, t^2}.
constexpr std::array<double, 3> bezier_weights(double t) {
    const double u = 1.0 - t;
    return {u * u, 2.0 * u * t, t * t};
}

/// Absolute canvas point of the stroke's curve at parameter t in [0, 1].
inline Vec2 bezier_point(const Brushstroke& s, double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("bezier_point: t outside [0, 1]");
    const auto w = bezier_weights(t);
    return s.location + w[0] * s.p0_off + w[1] * s.p1_off + w[2] * s.p2_off;
}

/// The equidistant parameter grid t_j = j / (S - 1), endpoints included.
inline std::vector<double> sample_grid(int samples) {
    if (samples < 2) throw ConfigError("sample count must be at least 2, got " + std::to_string(samples));
    std::vector<double> ts(static_cast<std::size_t>(samples));
    for (int j = 0; j < samples; ++j) ts[j] = static_cast<double>(j) / (samples - 1);
    ts.back() = 1.0;
    return ts;
}

inline std::vector<Vec2> sample_stroke(const Brushstroke& s, int samples) {
    const auto ts = sample_grid(samples);
    std::vector<Vec2> pts;
    pts.reserve(ts.size());
    for (double t : ts) pts.push_back(bezier_point(s, t));
    return pts;
}

/// Distance from p to the nearest of `points`; also reports which one
/// (lowest index on ties).
inline double nearest_sample(const Vec2& p, std::span<const Vec2> points, std::size_t* argmin = nullptr) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < points.size(); ++j) {
        const double dy = p.y - points[j].y;
        const double dx = p.x - points[j].x;
        const double d2 = dy * dy + dx * dx;
        if (d2 < best) {
            best = d2;
            best_j = j;
        }
    }
    if (argmin) *argmin = best_j;
    return std::sqrt(best);
}

/// Sampled approximation of the distance from p to the stroke's curve.
inline double stroke_distance(const Vec2& p, const Brushstroke& s, int samples) {
    const auto pts = sample_stroke(s, samples);
    return nearest_sample(p, pts);
}

} // namespace brushfit
