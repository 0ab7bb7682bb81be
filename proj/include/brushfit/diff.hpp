#pragma once

// Reverse-mode gradients through the renderer and loss terms.
//
// The chain rule is hand-derived. Per pixel with upstream gradient g_c and
// candidate weights alpha_n = a_n m_n:
//   dL/dcolor_n,c = g_c alpha_n
//   G_n           = sum_c g_c (color_n,c - background_c)
//   dL/dm_n = G_n a_n,  dL/da_n = G_n m_n
//   softmax:  dL/dD_n += t_softmax a_n (sum_k a_k dL/da_k - dL/da_n)
//   sigmoid:  dL/dD_n -= t_sigmoid m_n (1 - m_n) dL/dm_n,  dL/dwidth_n = -(same)
//   distance: dL/dsample = dL/dD_n (sample - p) / D_n at the attaining sample
// and each sample point is loc + b0 P0 + b1 P1 + b2 P2 with Bernstein weights b.
// Clamps are treated as identity; projections happen after the optimizer step.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "canvas.hpp"
#include "error.hpp"
#include "geometry.hpp"
#include "losses.hpp"
#include "parallel.hpp"
#include "renderer.hpp"

namespace brushfit {

/// d(loss)/d(parameters), N x 12 in the Brushstroke flat layout.
struct ParamGradient {
    std::vector<double> values;

    ParamGradient() = default;
    explicit ParamGradient(std::size_t strokes) : values(strokes * Brushstroke::kParams, 0.0) {}

    std::size_t strokes() const { return values.size() / Brushstroke::kParams; }
    double& at(std::size_t n, std::size_t p) { return values[n * Brushstroke::kParams + p]; }
    double at(std::size_t n, std::size_t p) const { return values[n * Brushstroke::kParams + p]; }
};

inline void check_finite(const Canvas& c, const char* what, long step = -1) {
    for (std::size_t i = 0; i < c.size(); ++i)
        if (!std::isfinite(c.values()[i]))
            throw NumericalError(std::string(what) + " is not finite at pixel " + std::to_string(i / 3), NumericalError::Where::Pixel,
                                 i / 3, step);
}

inline void check_finite(const ParamGradient& g, long step = -1) {
    for (std::size_t i = 0; i < g.values.size(); ++i)
        if (!std::isfinite(g.values[i]))
            throw NumericalError("gradient is not finite for stroke " + std::to_string(i / Brushstroke::kParams) + " parameter " +
                                     std::to_string(i % Brushstroke::kParams),
                                 NumericalError::Where::Stroke, i / Brushstroke::kParams, step);
}

/// Backpropagates dL/d(canvas) through one recorded render.
inline ParamGradient backward_render(const StrokeSet& set, const RenderParams& params, const NearestStrokeIndex& index,
                                     const RenderTape& tape, const Canvas& canvas_grad) {
    ParamGradient out(set.size());
    if (set.empty()) return out;
    const int h = set.canvas_h, w = set.canvas_w, k = index.k;
    if (canvas_grad.height() != h || canvas_grad.width() != w) throw DomainError("backward_render: gradient shape mismatch");
    if (tape.height != h || tape.width != w || tape.k != k) throw DomainError("backward_render: tape does not match index");

    const auto grid = sample_grid(params.samples);
    const std::size_t s_count = grid.size();
    std::vector<std::array<double, 3>> bern(s_count);
    for (std::size_t j = 0; j < s_count; ++j) bern[j] = bezier_weights(grid[j]);
    const auto points = detail::sample_all(set, grid);

    const std::size_t blocks = detail::row_blocks(h);
    std::vector<std::vector<double>> partial(blocks);
    for_each_block(blocks, [&](std::size_t b) {
        auto& acc = partial[b];
        acc.assign(set.size() * Brushstroke::kParams, 0.0);
        PixelWeights pw;
        std::vector<double> dist(static_cast<std::size_t>(k)), d_assign(static_cast<std::size_t>(k)),
            d_mask(static_cast<std::size_t>(k));
        const auto [y0, y1] = block_range(static_cast<std::size_t>(h), blocks, b);
        for (int y = static_cast<int>(y0); y < static_cast<int>(y1); ++y) {
            for (int x = 0; x < w; ++x) {
                const double g[3] = {canvas_grad.at(y, x, 0), canvas_grad.at(y, x, 1), canvas_grad.at(y, x, 2)};
                if (g[0] == 0.0 && g[1] == 0.0 && g[2] == 0.0) continue;
                const auto cands = index.candidates(y, x);
                for (int i = 0; i < k; ++i) dist[i] = tape.distance[tape.slot(y, x, i)];
                pixel_weights(dist, cands, set, params, pw);

                double sum_a_da = 0.0;
                for (int i = 0; i < k; ++i) {
                    const auto& s = set.strokes[cands[i]];
                    double* row = &acc[cands[i] * Brushstroke::kParams];
                    const double alpha = pw.assign[i] * pw.mask[i];
                    double big_g = 0.0;
                    for (int c = 0; c < 3; ++c) {
                        const double col = std::clamp(s.color[c], 0.0, 1.0);
                        big_g += g[c] * (col - params.background[c]);
                        row[param::kRed + c] += g[c] * alpha;
                    }
                    d_mask[i] = big_g * pw.assign[i];
                    d_assign[i] = big_g * pw.mask[i];
                    sum_a_da += pw.assign[i] * d_assign[i];
                }
                const Vec2 p{static_cast<double>(y), static_cast<double>(x)};
                for (int i = 0; i < k; ++i) {
                    const std::size_t n = cands[i];
                    double* row = &acc[n * Brushstroke::kParams];
                    const double m = pw.mask[i];
                    const double dz_mask = d_mask[i] * m * (1.0 - m) * params.t_sigmoid;
                    row[param::kWidth] += dz_mask;
                    double d_dist = -dz_mask;
                    d_dist += params.t_softmax * pw.assign[i] * (sum_a_da - d_assign[i]);
                    if (d_dist == 0.0 || !(dist[i] > 1e-12)) continue;
                    const std::size_t j = tape.nearest_sample[tape.slot(y, x, i)];
                    const Vec2 u = (points[n * s_count + j] - p) * (d_dist / dist[i]);
                    row[param::kLocY] += u.y;
                    row[param::kLocX] += u.x;
                    row[param::kP0Y] += bern[j][0] * u.y;
                    row[param::kP0X] += bern[j][0] * u.x;
                    row[param::kP1Y] += bern[j][1] * u.y;
                    row[param::kP1X] += bern[j][1] * u.x;
                    row[param::kP2Y] += bern[j][2] * u.y;
                    row[param::kP2X] += bern[j][2] * u.x;
                }
            }
        }
    });
    for (const auto& acc : partial)
        for (std::size_t i = 0; i < acc.size(); ++i) out.values[i] += acc[i];
    return out;
}

struct RenderLossResult {
    LossValue loss;
    ParamGradient grad;
    Canvas rendered;
};

/// Loss of render(strokes) and its gradient w.r.t. every stroke parameter.
/// When no index is given one is built from the current geometry; the
/// candidate sets are held fixed while differentiating.
inline RenderLossResult grad_render_loss(const StrokeSet& set, const RenderParams& params, const LossEvaluator& loss,
                                         const NearestStrokeIndex* index = nullptr, AllocationTracker* tracker = nullptr,
                                         long step = -1) {
    RenderLossResult out;
    out.grad = ParamGradient(set.size());
    if (set.empty()) {
        out.rendered = Canvas(set.canvas_h, set.canvas_w, params.background);
        out.loss = loss.evaluate(out.rendered, &set, nullptr);
        return out;
    }
    std::optional<NearestStrokeIndex> built;
    if (!index) {
        built = build_nearest_index(set, params.neighbors, params.coarse_factor);
        index = &*built;
    }
    RenderTape tape;
    out.rendered = render(set, params, *index, &tape, tracker);
    check_finite(out.rendered, "rendered canvas", step);

    Canvas canvas_grad(set.canvas_h, set.canvas_w);
    out.loss = loss.evaluate(out.rendered, &set, &canvas_grad, out.grad.values);
    check_finite(canvas_grad, "loss gradient", step);
    check_finite(out.grad, step);
    if (!std::isfinite(out.loss.total)) throw NumericalError("loss is not finite", NumericalError::Where::Pixel, 0, step);

    const auto render_grad = backward_render(set, params, *index, tape, canvas_grad);
    for (std::size_t i = 0; i < render_grad.values.size(); ++i) out.grad.values[i] += render_grad.values[i];
    check_finite(out.grad, step);
    return out;
}

struct PixelLossResult {
    LossValue loss;
    Canvas grad;
};

/// Loss of a canvas and its gradient w.r.t. every pixel value.
inline PixelLossResult grad_pixel_loss(const Canvas& canvas, const LossEvaluator& loss, long step = -1) {
    PixelLossResult out;
    out.grad = Canvas(canvas.height(), canvas.width());
    out.loss = loss.evaluate(canvas, nullptr, &out.grad);
    check_finite(out.grad, "pixel gradient", step);
    if (!std::isfinite(out.loss.total)) throw NumericalError("loss is not finite", NumericalError::Where::Pixel, 0, step);
    return out;
}

} // namespace brushfit
