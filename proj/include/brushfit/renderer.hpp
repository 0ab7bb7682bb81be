#pragma once

// Differentiable stroke rasterizer.
//
// For every pixel p and every candidate stroke n:
//   D_n = min_j |p - B_n(t_j)|                         (sampled curve distance)
//   m_n = sigmoid(t_sigmoid * (width_n - D_n))          (soft coverage mask)
//   a_n = softmax_n(-t_softmax * D_n)                   (soft nearest-stroke assignment)
//   pixel = sum_n a_n m_n color_n + (1 - sum_n a_n m_n) background
//
// The accelerated path restricts candidates to the K strokes whose locations
// are nearest to a coarse anchor grid point, so distance storage is
// H x W x K regardless of the number of strokes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include "canvas.hpp"
#include "error.hpp"
#include "geometry.hpp"
#include "parallel.hpp"

namespace brushfit {

struct RenderParams {
    int samples = 10;
    int neighbors = 20;
    double t_sigmoid = 10.0;
    double t_softmax = 10.0;
    Rgb background{1.0, 1.0, 1.0};
    double coarse_factor = 0.1;

    void validate() const {
        if (samples < 2 || samples > 65535) throw ConfigError("render.samples must be in [2, 65535]");
        if (neighbors < 1) throw ConfigError("render.neighbors must be >= 1");
        if (!(t_sigmoid > 0.0)) throw ConfigError("render.t_sigmoid must be > 0");
        if (!(t_softmax > 0.0)) throw ConfigError("render.t_softmax must be > 0");
        if (!(coarse_factor > 0.0 && coarse_factor <= 1.0)) throw ConfigError("render.coarse_factor must be in (0, 1]");
        for (std::size_t c = 0; c < 3; ++c)
            if (!(background[c] >= 0.0 && background[c] <= 1.0)) throw ConfigError("render.background must be in [0, 1]");
    }
};

/// Counts live and peak elements of tracked distance storage.
class AllocationTracker {
public:
    void allocate(std::size_t elements) {
        current_ += elements;
        peak_ = std::max(peak_, current_);
    }
    void release(std::size_t elements) { current_ -= std::min(current_, elements); }
    std::size_t current() const { return current_; }
    std::size_t peak() const { return peak_; }
    void reset() { current_ = peak_ = 0; }

private:
    std::size_t current_ = 0;
    std::size_t peak_ = 0;
};

/// A vector whose element count is reported to an AllocationTracker for its lifetime.
template <typename T>
class TrackedBuffer {
public:
    TrackedBuffer() = default;
    TrackedBuffer(std::size_t n, AllocationTracker* tracker) : data_(n), tracker_(tracker) {
        if (tracker_) tracker_->allocate(n);
    }
    TrackedBuffer(const TrackedBuffer&) = delete;
    TrackedBuffer& operator=(const TrackedBuffer&) = delete;
    TrackedBuffer(TrackedBuffer&& o) noexcept : data_(std::move(o.data_)), tracker_(std::exchange(o.tracker_, nullptr)) {}
    TrackedBuffer& operator=(TrackedBuffer&& o) noexcept {
        if (this != &o) {
            release();
            data_ = std::move(o.data_);
            tracker_ = std::exchange(o.tracker_, nullptr);
        }
        return *this;
    }
    ~TrackedBuffer() { release(); }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }
    std::size_t size() const { return data_.size(); }
    auto begin() const { return data_.begin(); }
    auto end() const { return data_.end(); }

private:
    void release() {
        if (tracker_) tracker_->release(data_.size());
        tracker_ = nullptr;
        data_.clear();
    }

    std::vector<T> data_;
    AllocationTracker* tracker_ = nullptr;
};

/// Per-pixel candidate stroke indices, H x W x K.
struct NearestStrokeIndex {
    int height = 0;
    int width = 0;
    int k = 0;
    int requested_k = 0;
    int anchor_h = 0;
    int anchor_w = 0;
    std::vector<std::uint32_t> idcs;

    bool k_clamped() const { return requested_k > k; }

    std::span<const std::uint32_t> candidates(int y, int x) const {
        return std::span<const std::uint32_t>(idcs).subspan((static_cast<std::size_t>(y) * width + x) * k, k);
    }
};

namespace detail {

inline int anchor_count(int extent, double coarse_factor) {
    return std::clamp(static_cast<int>(std::ceil(coarse_factor * extent - 1e-9)), 1, std::max(1, extent));
}

// Continuous canvas coordinate of anchor i out of `anchors` covering `extent` pixels.
inline double anchor_coord(int i, int anchors, int extent) {
    return (i + 0.5) * static_cast<double>(extent) / anchors - 0.5;
}

// Anchor that pixel coordinate v falls into under nearest-neighbor upsampling.
inline int anchor_of(int v, int anchors, int extent) {
    return std::min(anchors - 1, static_cast<int>(static_cast<long long>(v) * anchors / extent));
}

} // namespace detail

/// Builds the candidate index from a coarse anchor grid. Each anchor keeps
/// the K strokes whose locations are nearest (ties by lower index); pixels
/// inherit the list of their anchor. K is clamped to N.
inline NearestStrokeIndex build_nearest_index(const StrokeSet& set, int k, double coarse_factor = 0.1) {
    if (set.empty()) throw DomainError("build_nearest_index: empty stroke set");
    if (k < 1) throw ConfigError("build_nearest_index: K must be >= 1");
    if (!(coarse_factor > 0.0 && coarse_factor <= 1.0)) throw ConfigError("build_nearest_index: coarse_factor must be in (0, 1]");
    const int h = set.canvas_h, w = set.canvas_w;
    if (h <= 0 || w <= 0) throw DomainError("build_nearest_index: canvas dimensions must be positive");

    NearestStrokeIndex index;
    index.height = h;
    index.width = w;
    index.requested_k = k;
    index.k = std::min<int>(k, static_cast<int>(set.size()));
    index.anchor_h = detail::anchor_count(h, coarse_factor);
    index.anchor_w = detail::anchor_count(w, coarse_factor);
    const std::size_t kk = static_cast<std::size_t>(index.k);

    // Anchor-level top-K with a bounded heap: scratch is O(K) per anchor.
    std::vector<std::uint32_t> anchor_idcs(static_cast<std::size_t>(index.anchor_h) * index.anchor_w * kk);
    const std::size_t blocks = static_cast<std::size_t>(index.anchor_h);
    for_each_block(blocks, [&](std::size_t ay) {
        using Entry = std::pair<double, std::uint32_t>;
        std::vector<Entry> heap;
        heap.reserve(kk + 1);
        const double cy = detail::anchor_coord(static_cast<int>(ay), index.anchor_h, h);
        for (int ax = 0; ax < index.anchor_w; ++ax) {
            const double cx = detail::anchor_coord(ax, index.anchor_w, w);
            heap.clear();
            for (std::uint32_t n = 0; n < set.size(); ++n) {
                const auto& loc = set.strokes[n].location;
                const double dy = loc.y - cy, dx = loc.x - cx;
                Entry e{dy * dy + dx * dx, n};
                if (heap.size() < kk) {
                    heap.push_back(e);
                    std::push_heap(heap.begin(), heap.end());
                } else if (e < heap.front()) {
                    std::pop_heap(heap.begin(), heap.end());
                    heap.back() = e;
                    std::push_heap(heap.begin(), heap.end());
                }
            }
            std::sort_heap(heap.begin(), heap.end());
            auto* out = &anchor_idcs[(ay * index.anchor_w + ax) * kk];
            for (std::size_t i = 0; i < kk; ++i) out[i] = heap[i].second;
        }
    });

    index.idcs.resize(static_cast<std::size_t>(h) * w * kk);
    for (int y = 0; y < h; ++y) {
        const int ay = detail::anchor_of(y, index.anchor_h, h);
        for (int x = 0; x < w; ++x) {
            const int ax = detail::anchor_of(x, index.anchor_w, w);
            std::copy_n(&anchor_idcs[(static_cast<std::size_t>(ay) * index.anchor_w + ax) * kk], kk,
                        &index.idcs[(static_cast<std::size_t>(y) * w + x) * kk]);
        }
    }
    return index;
}

/// Intermediates of one forward render, consumed by the backward pass.
/// Distances and attaining sample indices are stored per (pixel, candidate).
struct RenderTape {
    int height = 0;
    int width = 0;
    int k = 0;
    TrackedBuffer<double> distance;
    TrackedBuffer<std::uint16_t> nearest_sample;

    std::size_t slot(int y, int x, int cand) const {
        return (static_cast<std::size_t>(y) * width + x) * k + cand;
    }
};

namespace detail {

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// Absolute sample points of every stroke, N x S.
inline std::vector<Vec2> sample_all(const StrokeSet& set, const std::vector<double>& grid) {
    std::vector<Vec2> pts(set.size() * grid.size());
    for (std::size_t n = 0; n < set.size(); ++n) {
        const auto& s = set.strokes[n];
        for (std::size_t j = 0; j < grid.size(); ++j) {
            const auto w = bezier_weights(grid[j]);
            pts[n * grid.size() + j] = s.location + w[0] * s.p0_off + w[1] * s.p1_off + w[2] * s.p2_off;
        }
    }
    return pts;
}

inline std::size_t row_blocks(int h) { return static_cast<std::size_t>(std::clamp(h, 1, 32)); }

} // namespace detail

/// Soft weights of one pixel's candidates: assignment a, mask m.
struct PixelWeights {
    std::vector<double> assign;
    std::vector<double> mask;
};

inline void pixel_weights(std::span<const double> dist, std::span<const std::uint32_t> cands, const StrokeSet& set,
                          const RenderParams& params, PixelWeights& out) {
    const std::size_t k = cands.size();
    out.assign.resize(k);
    out.mask.resize(k);
    double zmax = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i) zmax = std::max(zmax, -params.t_softmax * dist[i]);
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        out.assign[i] = std::exp(-params.t_softmax * dist[i] - zmax);
        total += out.assign[i];
    }
    for (std::size_t i = 0; i < k; ++i) {
        out.assign[i] /= total;
        out.mask[i] = detail::sigmoid(params.t_sigmoid * (set.strokes[cands[i]].width - dist[i]));
    }
}

/// Renders with the K-nearest candidate index. When `tape` is non-null it
/// receives the per-candidate distances needed for the backward pass.
inline Canvas render(const StrokeSet& set, const RenderParams& params, const NearestStrokeIndex& index,
                     RenderTape* tape = nullptr, AllocationTracker* tracker = nullptr) {
    params.validate();
    const int h = set.canvas_h, w = set.canvas_w;
    Canvas out(h, w, params.background);
    if (set.empty()) return out;
    if (index.height != h || index.width != w) throw DomainError("render: index built for a different canvas");
    for (auto n : index.idcs)
        if (n >= set.size()) throw DomainError("render: index refers to a stroke that does not exist");

    const int k = index.k;
    const auto grid = sample_grid(params.samples);
    const std::size_t s_count = grid.size();
    const auto points = detail::sample_all(set, grid);

    RenderTape local;
    RenderTape& tp = tape ? *tape : local;
    tp.height = h;
    tp.width = w;
    tp.k = k;
    const std::size_t slots = static_cast<std::size_t>(h) * w * k;
    if (tp.distance.size() != slots || tape == nullptr) {
        tp.distance = TrackedBuffer<double>(slots, tracker);
        tp.nearest_sample = TrackedBuffer<std::uint16_t>(slots, tracker);
    }

    const std::size_t blocks = detail::row_blocks(h);
    for_each_block(blocks, [&](std::size_t b) {
        PixelWeights pw;
        std::vector<double> dist(static_cast<std::size_t>(k));
        const auto [y0, y1] = block_range(static_cast<std::size_t>(h), blocks, b);
        for (int y = static_cast<int>(y0); y < static_cast<int>(y1); ++y) {
            for (int x = 0; x < w; ++x) {
                const auto cands = index.candidates(y, x);
                const Vec2 p{static_cast<double>(y), static_cast<double>(x)};
                for (int i = 0; i < k; ++i) {
                    std::size_t j = 0;
                    dist[i] = nearest_sample(p, std::span<const Vec2>(points).subspan(cands[i] * s_count, s_count), &j);
                    tp.distance[tp.slot(y, x, i)] = dist[i];
                    tp.nearest_sample[tp.slot(y, x, i)] = static_cast<std::uint16_t>(j);
                }
                pixel_weights(dist, cands, set, params, pw);
                for (int c = 0; c < 3; ++c) {
                    const double bg = params.background[c];
                    double v = bg;
                    for (int i = 0; i < k; ++i) {
                        const double col = std::clamp(set.strokes[cands[i]].color[c], 0.0, 1.0);
                        v += pw.assign[i] * pw.mask[i] * (col - bg);
                    }
                    out.at(y, x, c) = std::clamp(v, 0.0, 1.0);
                }
            }
        }
    });
    return out;
}

/// Builds a fresh index and renders.
inline Canvas render(const StrokeSet& set, const RenderParams& params) {
    params.validate();
    if (set.empty()) return Canvas(set.canvas_h, set.canvas_w, params.background);
    const auto index = build_nearest_index(set, params.neighbors, params.coarse_factor);
    return render(set, params, index);
}

/// Largest H*W*N*S tensor render_dense will materialize.
inline constexpr std::size_t kDenseRenderLimit = std::size_t{1} << 27;

/// Reference renderer: materializes the full H x W x N x S distance tensor
/// and treats every stroke as a candidate. Desk-scale only.
inline Canvas render_dense(const StrokeSet& set, const RenderParams& params) {
    params.validate();
    const int h = set.canvas_h, w = set.canvas_w;
    const std::size_t n = set.size();
    const std::size_t s = static_cast<std::size_t>(params.samples);
    Canvas out(h, w, params.background);
    if (n == 0) return out;
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    if (hw * n * s > kDenseRenderLimit)
        throw DomainError("render_dense: H*W*N*S = " + std::to_string(hw * n * s) + " exceeds the dense limit");

    const auto grid = sample_grid(params.samples);
    std::vector<Vec2> sampled(n * s);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < s; ++j) sampled[i * s + j] = bezier_point(set.strokes[i], grid[j]);

    std::vector<double> full(hw * n * s);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < s; ++j)
                    full[((static_cast<std::size_t>(y) * w + x) * n + i) * s + j] =
                        distance(Vec2{static_cast<double>(y), static_cast<double>(x)}, sampled[i * s + j]);

    std::vector<double> strokes_dist(hw * n);
    for (std::size_t q = 0; q < hw * n; ++q)
        strokes_dist[q] = *std::min_element(full.begin() + q * s, full.begin() + (q + 1) * s);

    for (std::size_t q = 0; q < hw; ++q) {
        const double* d = &strokes_dist[q * n];
        const double dmin = *std::min_element(d, d + n);
        std::vector<double> assign(n), mask(n);
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            assign[i] = std::exp(-params.t_softmax * (d[i] - dmin));
            z += assign[i];
            mask[i] = detail::sigmoid(params.t_sigmoid * (set.strokes[i].width - d[i]));
        }
        double coverage = 0.0;
        double color[3] = {0, 0, 0};
        for (std::size_t i = 0; i < n; ++i) {
            const double wgt = assign[i] / z * mask[i];
            coverage += wgt;
            for (int c = 0; c < 3; ++c) color[c] += wgt * std::clamp(set.strokes[i].color[c], 0.0, 1.0);
        }
        const int y = static_cast<int>(q / w), x = static_cast<int>(q % w);
        for (int c = 0; c < 3; ++c)
            out.at(y, x, c) = std::clamp(color[c] + (1.0 - coverage) * params.background[c], 0.0, 1.0);
    }
    return out;
}

} // namespace brushfit
