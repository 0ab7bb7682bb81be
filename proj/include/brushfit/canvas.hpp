#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "geometry.hpp"

namespace brushfit {

/// H x W x 3 image of doubles, row-major with interleaved channels.
class Canvas {
public:
    Canvas() = default;
    Canvas(int h, int w, double fill = 0.0) : h_(h), w_(w) {
        if (h < 0 || w < 0) throw DomainError("Canvas: negative dimensions");
        data_.assign(static_cast<std::size_t>(h) * w * 3, fill);
    }
    Canvas(int h, int w, const Rgb& fill) : Canvas(h, w) {
        for (std::size_t i = 0; i < pixel_count(); ++i)
            for (std::size_t c = 0; c < 3; ++c) data_[i * 3 + c] = fill[c];
    }

    int height() const { return h_; }
    int width() const { return w_; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(h_) * w_; }
    std::size_t size() const { return data_.size(); }
    bool same_shape(const Canvas& o) const { return h_ == o.h_ && w_ == o.w_; }

    double& at(int y, int x, int c) { return data_[(static_cast<std::size_t>(y) * w_ + x) * 3 + c]; }
    double at(int y, int x, int c) const { return data_[(static_cast<std::size_t>(y) * w_ + x) * 3 + c]; }

    Rgb pixel(int y, int x) const { return {at(y, x, 0), at(y, x, 1), at(y, x, 2)}; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    void clamp01() {
        for (auto& v : data_) v = std::clamp(v, 0.0, 1.0);
    }

    Rgb mean_color() const {
        Rgb m;
        if (pixel_count() == 0) return m;
        for (std::size_t i = 0; i < pixel_count(); ++i)
            for (std::size_t c = 0; c < 3; ++c) m[c] += data_[i * 3 + c];
        for (std::size_t c = 0; c < 3; ++c) m[c] /= static_cast<double>(pixel_count());
        return m;
    }

    friend bool operator==(const Canvas&, const Canvas&) = default;

private:
    int h_ = 0;
    int w_ = 0;
    std::vector<double> data_;
};

inline double max_abs_diff(const Canvas& a, const Canvas& b) {
    if (!a.same_shape(b)) throw DomainError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    return m;
}

/// Resamples to h x w. Downscaling averages the covered source area;
/// upscaling interpolates bilinearly between pixel centers.
inline Canvas resize(const Canvas& src, int h, int w) {
    if (h <= 0 || w <= 0) throw DomainError("resize: target dimensions must be positive");
    if (src.height() == h && src.width() == w) return src;
    if (src.pixel_count() == 0) throw DomainError("resize: empty source");
    Canvas out(h, w);
    const double sy = static_cast<double>(src.height()) / h;
    const double sx = static_cast<double>(src.width()) / w;
    const bool area = sy > 1.0 || sx > 1.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (area) {
                const double y0 = y * sy, y1 = (y + 1) * sy;
                const double x0 = x * sx, x1 = (x + 1) * sx;
                double acc[3] = {0, 0, 0};
                double total = 0.0;
                for (int iy = static_cast<int>(y0); iy < std::min<int>(src.height(), static_cast<int>(std::ceil(y1))); ++iy) {
                    const double wy = std::min<double>(iy + 1, y1) - std::max<double>(iy, y0);
                    if (wy <= 0) continue;
                    for (int ix = static_cast<int>(x0); ix < std::min<int>(src.width(), static_cast<int>(std::ceil(x1))); ++ix) {
                        const double wx = std::min<double>(ix + 1, x1) - std::max<double>(ix, x0);
                        if (wx <= 0) continue;
                        for (int c = 0; c < 3; ++c) acc[c] += wy * wx * src.at(iy, ix, c);
                        total += wy * wx;
                    }
                }
                for (int c = 0; c < 3; ++c) out.at(y, x, c) = acc[c] / total;
            } else {
                const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height() - 1.0);
                const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width() - 1.0);
                const int iy = static_cast<int>(fy), ix = static_cast<int>(fx);
                const int iy1 = std::min(iy + 1, src.height() - 1), ix1 = std::min(ix + 1, src.width() - 1);
                const double ty = fy - iy, tx = fx - ix;
                for (int c = 0; c < 3; ++c) {
                    const double top = src.at(iy, ix, c) * (1 - tx) + src.at(iy, ix1, c) * tx;
                    const double bot = src.at(iy1, ix, c) * (1 - tx) + src.at(iy1, ix1, c) * tx;
                    out.at(y, x, c) = top * (1 - ty) + bot * ty;
                }
            }
        }
    }
    return out;
}

/// Dimensions with the given smallest side, preserving aspect ratio.
inline std::pair<int, int> dims_for_short_side(int h, int w, int short_side) {
    if (h <= 0 || w <= 0 || short_side <= 0) throw DomainError("dims_for_short_side: non-positive size");
    if (h <= w) return {short_side, std::max(1, static_cast<int>(std::lround(static_cast<double>(w) * short_side / h)))};
    return {std::max(1, static_cast<int>(std::lround(static_cast<double>(h) * short_side / w))), short_side};
}

} // namespace brushfit
