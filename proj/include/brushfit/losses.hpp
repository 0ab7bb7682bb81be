#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "canvas.hpp"
#include "error.hpp"
#include "features.hpp"
#include "geometry.hpp"

namespace brushfit {

// ---------------------------------------------------------------------------
// Pixel losses

inline void require_same_shape(const Canvas& a, const Canvas& b, const char* what) {
    if (!a.same_shape(b))
        throw DomainError(std::string(what) + ": shape mismatch (" + std::to_string(a.height()) + "x" +
                          std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" + std::to_string(b.width()) + ")");
}

/// Mean of squared elementwise differences over all pixels and channels.
inline double mse(const Canvas& a, const Canvas& b) {
    require_same_shape(a, b, "mse");
    if (a.size() == 0) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.values()[i] - b.values()[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

/// Adds scale * d(mse)/d(a) into grad.
inline void add_mse_grad(const Canvas& a, const Canvas& b, double scale, Canvas& grad) {
    require_same_shape(a, b, "mse");
    const double k = 2.0 * scale / static_cast<double>(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) grad.values()[i] += k * (a.values()[i] - b.values()[i]);
}

/// Sum of squared forward differences along rows and columns, all channels.
inline double tv_loss(const Canvas& c) {
    double acc = 0.0;
    for (int y = 0; y < c.height(); ++y)
        for (int x = 0; x < c.width(); ++x)
            for (int k = 0; k < 3; ++k) {
                if (y + 1 < c.height()) {
                    const double d = c.at(y + 1, x, k) - c.at(y, x, k);
                    acc += d * d;
                }
                if (x + 1 < c.width()) {
                    const double d = c.at(y, x + 1, k) - c.at(y, x, k);
                    acc += d * d;
                }
            }
    return acc;
}

inline void add_tv_grad(const Canvas& c, double scale, Canvas& grad) {
    for (int y = 0; y < c.height(); ++y)
        for (int x = 0; x < c.width(); ++x)
            for (int k = 0; k < 3; ++k) {
                if (y + 1 < c.height()) {
                    const double d = 2.0 * scale * (c.at(y + 1, x, k) - c.at(y, x, k));
                    grad.at(y + 1, x, k) += d;
                    grad.at(y, x, k) -= d;
                }
                if (x + 1 < c.width()) {
                    const double d = 2.0 * scale * (c.at(y, x + 1, k) - c.at(y, x, k));
                    grad.at(y, x + 1, k) += d;
                    grad.at(y, x, k) -= d;
                }
            }
}

// ---------------------------------------------------------------------------
// Feature-space losses

/// Row-major C x C matrix.
struct Matrix {
    int n = 0;
    std::vector<double> data;

    explicit Matrix(int n_ = 0) : n(n_), data(static_cast<std::size_t>(n_) * n_, 0.0) {}
    double& operator()(int i, int j) { return data[static_cast<std::size_t>(i) * n + j]; }
    double operator()(int i, int j) const { return data[static_cast<std::size_t>(i) * n + j]; }
};

/// Unnormalized Gram matrix G_ij = sum over positions of F_i * F_j.
inline Matrix gram(const FeatureMap& f) {
    if (f.c < 1) throw DomainError("gram: feature map has no channels");
    Matrix g(f.c);
    for (std::size_t p = 0; p < f.positions(); ++p) {
        const double* v = &f.data[p * f.c];
        for (int i = 0; i < f.c; ++i) {
            const double vi = v[i];
            if (vi == 0.0) continue;
            double* row = &g.data[static_cast<std::size_t>(i) * f.c];
            for (int j = i; j < f.c; ++j) row[j] += vi * v[j];
        }
    }
    for (int i = 0; i < f.c; ++i)
        for (int j = 0; j < i; ++j) g(i, j) = g(j, i);
    return g;
}

inline double frobenius_distance(const Matrix& a, const Matrix& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

/// One layer's style error: ||G_r - G_s||_F / (N^2 M^2), N = channels, M = positions.
inline double style_layer_error(const Matrix& g_rendered, const Matrix& g_style, const FeatureMap& shape) {
    const double n = shape.c, m = static_cast<double>(shape.positions());
    return frobenius_distance(g_rendered, g_style) / (n * n * m * m);
}

inline std::vector<double> resolve_layer_weights(std::size_t layers, std::span<const double> weights) {
    if (weights.empty()) return std::vector<double>(layers, layers ? 1.0 / static_cast<double>(layers) : 0.0);
    if (weights.size() != layers) throw ConfigError("style layer weights must match the number of style layers");
    for (double w : weights)
        if (!(w >= 0.0)) throw ConfigError("style layer weights must be >= 0");
    return {weights.begin(), weights.end()};
}

/// Weighted Gram-matrix style loss; empty `weights` means uniform 1/|layers|.
inline double style_loss(const Canvas& rendered, const Canvas& style, const FeatureExtractor& extractor,
                         std::span<const std::string> layers, std::span<const double> weights = {}) {
    const auto w = resolve_layer_weights(layers.size(), weights);
    const auto fr = extractor.extract(rendered);
    const auto fs = extractor.extract(style);
    double total = 0.0;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto idx = extractor.layer_index(layers[l]);
        total += w[l] * style_layer_error(gram(fr[idx]), gram(fs[idx]), fr[idx]);
    }
    return total;
}

inline double feature_distance(const FeatureMap& a, const FeatureMap& b) {
    if (a.data.size() != b.data.size()) throw DomainError("feature maps differ in shape");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

/// Sum over layers of the Euclidean distance between feature maps.
inline double content_loss(const Canvas& rendered, const Canvas& content, const FeatureExtractor& extractor,
                           std::span<const std::string> layers) {
    const auto fr = extractor.extract(rendered);
    const auto fc = extractor.extract(content);
    double total = 0.0;
    for (const auto& name : layers) {
        const auto idx = extractor.layer_index(name);
        total += feature_distance(fr[idx], fc[idx]);
    }
    return total;
}

// ---------------------------------------------------------------------------
// Flow control

/// A user-drawn polyline with unit tangents at its first M - Q points.
class ControlPath {
public:
    ControlPath(std::vector<Vec2> points, int window = 3) : points_(std::move(points)), window_(window) {
        tangents_ = compute(points_, window_);
    }

    const std::vector<Vec2>& points() const { return points_; }
    const std::vector<Vec2>& tangents() const { return tangents_; }
    int window() const { return window_; }

    /// v_i = normalize(mean(P_{i+1..i+Q}) - P_i) for i in [0, M - Q).
    static std::vector<Vec2> compute(std::span<const Vec2> points, int window) {
        if (window < 1) throw ConfigError("path tangent window Q must be >= 1");
        const std::size_t m = points.size(), q = static_cast<std::size_t>(window);
        if (m <= q)
            throw DomainError("control path needs at least Q+1 = " + std::to_string(q + 1) + " points, got " + std::to_string(m));
        std::vector<Vec2> out;
        out.reserve(m - q);
        for (std::size_t i = 0; i + q < m; ++i) {
            Vec2 mean;
            for (std::size_t j = 1; j <= q; ++j) mean += points[i + j];
            const Vec2 v = mean * (1.0 / static_cast<double>(q)) - points[i];
            const double len = norm(v);
            if (!(len > 0.0)) throw DomainError("control path has a zero-length tangent at point " + std::to_string(i));
            out.push_back(v * (1.0 / len));
        }
        return out;
    }

private:
    std::vector<Vec2> points_;
    int window_;
    std::vector<Vec2> tangents_;
};

inline std::vector<Vec2> path_tangents(std::span<const Vec2> points, int window = 3) {
    return ControlPath::compute(points, window);
}

/// Indices of the `count` strokes whose locations are nearest to p (ties by lower index).
inline std::vector<std::size_t> nearest_strokes(const StrokeSet& set, const Vec2& p, std::size_t count) {
    std::vector<std::size_t> order(set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    count = std::min(count, order.size());
    auto key = [&](std::size_t n) {
        const Vec2 d = set.strokes[n].location - p;
        return dot(d, d);
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          const double ka = key(a), kb = key(b);
                          return ka < kb || (ka == kb && a < b);
                      });
    order.resize(count);
    return order;
}

/// Every (tangent, stroke) pair the projection loss averages over.
struct ProjectionPair {
    Vec2 tangent;
    std::size_t stroke;
};

inline std::vector<ProjectionPair> projection_pairs(const StrokeSet& set, std::span<const ControlPath> paths, int neighbors) {
    if (neighbors < 1) throw ConfigError("projection loss L must be >= 1");
    std::vector<ProjectionPair> pairs;
    if (set.empty()) return pairs;
    for (const auto& path : paths) {
        const auto& pts = path.points();
        const auto& tans = path.tangents();
        for (std::size_t i = 0; i < tans.size(); ++i)
            for (auto n : nearest_strokes(set, pts[i], static_cast<std::size_t>(neighbors))) pairs.push_back({tans[i], n});
    }
    return pairs;
}

/// |<unit orientation, tangent>| of one stroke; 0 for a degenerate orientation.
inline double alignment(const Brushstroke& s, const Vec2& tangent) {
    const Vec2 d = s.orientation();
    const double len = norm(d);
    if (!(len > 1e-12)) return 0.0;
    return std::abs(dot(d, tangent)) / len;
}

/// Mean over (tangent, nearest-L stroke) pairs of 1 - |<d_hat, v_hat>|.
/// When `grad` is non-null (N x 12), scale * d(loss)/d(params) is added.
inline double projection_loss(const StrokeSet& set, std::span<const ControlPath> paths, int neighbors,
                              std::span<double> grad = {}, double scale = 1.0) {
    if (set.empty()) throw DomainError("projection_loss: empty stroke set");
    const auto pairs = projection_pairs(set, paths, neighbors);
    if (pairs.empty()) return 0.0;
    const double inv = 1.0 / static_cast<double>(pairs.size());
    double total = 0.0;
    for (const auto& pr : pairs) {
        const auto& s = set.strokes[pr.stroke];
        total += 1.0 - alignment(s, pr.tangent);
        if (grad.empty()) continue;
        const Vec2 d = s.orientation();
        const double len = norm(d);
        if (!(len > 1e-12)) continue;
        const Vec2 dhat = d * (1.0 / len);
        const double proj = dot(dhat, pr.tangent);
        if (proj == 0.0) continue;
        // d|<d_hat, v>|/dd = sign * (v - <d_hat, v> d_hat) / |d|
        const double sign = proj > 0 ? 1.0 : -1.0;
        const Vec2 g = (pr.tangent - proj * dhat) * (-sign * scale * inv / len);
        double* row = &grad[pr.stroke * Brushstroke::kParams];
        row[param::kP2Y] += g.y;
        row[param::kP2X] += g.x;
        row[param::kP0Y] -= g.y;
        row[param::kP0X] -= g.x;
    }
    return total * inv;
}

/// Mean |<d_hat, v_hat>| over the pairs the projection loss would use.
inline double mean_alignment(const StrokeSet& set, std::span<const ControlPath> paths, int neighbors) {
    const auto pairs = projection_pairs(set, paths, neighbors);
    if (pairs.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& pr : pairs) acc += alignment(set.strokes[pr.stroke], pr.tangent);
    return acc / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Composite objective

/// Weighted sum of loss terms. A zero weight disables a term.
struct LossSpec {
    double mse = 0.0;
    double content = 0.0;
    std::vector<std::string> content_layers{"f4", "f5"};
    double style = 0.0;
    std::vector<std::string> style_layers{"f1", "f2", "f3", "f4", "f5"};
    std::vector<double> style_layer_weights;  // empty: uniform
    double tv = 0.0;
    double projection = 0.0;
    std::vector<ControlPath> paths;
    int neighbors = 30;  // L: strokes per tangent affected by the projection term

    bool uses_features() const { return content > 0.0 || style > 0.0; }

    void validate() const {
        for (double w : {mse, content, style, tv, projection})
            if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and >= 0");
        if (mse == 0.0 && content == 0.0 && style == 0.0 && tv == 0.0 && projection == 0.0)
            throw ConfigError("loss spec needs at least one term with positive weight");
        if (neighbors < 1) throw ConfigError("loss.L must be >= 1");
        resolve_layer_weights(style_layers.size(), style_layer_weights);
    }
};

/// Images the loss terms compare against.
struct LossTargets {
    std::optional<Canvas> reference;  // mse and content target
    std::optional<Canvas> style;
};

struct LossValue {
    double total = 0.0;
    std::map<std::string, double> terms;
};

/// LossSpec bound to an extractor and targets, with target features cached.
/// Immutable after construction; the projection paths can be replaced by
/// constructing a new evaluator or through with_paths().
class LossEvaluator {
public:
    LossEvaluator(LossSpec spec, LossTargets targets, std::shared_ptr<const FeatureExtractor> extractor = nullptr)
        : spec_(std::move(spec)), targets_(std::move(targets)), extractor_(std::move(extractor)) {
        spec_.validate();
        if ((spec_.mse > 0.0 || spec_.content > 0.0) && !targets_.reference)
            throw ConfigError("mse/content terms need a reference image");
        if (spec_.style > 0.0 && !targets_.style) throw ConfigError("style term needs a style image");
        if (spec_.uses_features()) {
            if (!extractor_) throw ConfigError("content/style terms need a feature extractor");
            if (spec_.content > 0.0) {
                const auto f = extractor_->extract(*targets_.reference);
                for (const auto& name : spec_.content_layers) content_targets_.push_back(f[extractor_->layer_index(name)]);
            }
            if (spec_.style > 0.0) {
                style_weights_ = resolve_layer_weights(spec_.style_layers.size(), spec_.style_layer_weights);
                const auto f = extractor_->extract(*targets_.style);
                for (const auto& name : spec_.style_layers) style_grams_.push_back(gram(f[extractor_->layer_index(name)]));
            }
        }
    }

    const LossSpec& spec() const { return spec_; }
    const LossTargets& targets() const { return targets_; }
    const std::shared_ptr<const FeatureExtractor>& extractor() const { return extractor_; }

    LossEvaluator with_paths(std::vector<ControlPath> paths, int neighbors, double weight) const {
        LossEvaluator copy = *this;
        copy.spec_.paths = std::move(paths);
        copy.spec_.neighbors = neighbors;
        copy.spec_.projection = weight;
        copy.spec_.validate();
        return copy;
    }

    /// Evaluates every term. canvas_grad (same shape as canvas) and
    /// stroke_grad (N x 12, only touched by the projection term) receive
    /// gradients when non-null/non-empty.
    LossValue evaluate(const Canvas& canvas, const StrokeSet* strokes, Canvas* canvas_grad,
                       std::span<double> stroke_grad = {}) const {
        LossValue out;
        if (canvas_grad && !canvas_grad->same_shape(canvas)) *canvas_grad = Canvas(canvas.height(), canvas.width());
        auto add = [&](const std::string& name, double weight, double value) {
            out.terms[name] = weight * value;
            out.total += weight * value;
        };
        if (spec_.mse > 0.0) {
            add("mse", spec_.mse, mse(canvas, *targets_.reference));
            if (canvas_grad) add_mse_grad(canvas, *targets_.reference, spec_.mse, *canvas_grad);
        }
        if (spec_.tv > 0.0) {
            add("tv", spec_.tv, tv_loss(canvas));
            if (canvas_grad) add_tv_grad(canvas, spec_.tv, *canvas_grad);
        }
        if (spec_.uses_features()) evaluate_features(canvas, out, canvas_grad);
        if (spec_.projection > 0.0 && strokes && !strokes->empty()) {
            add("projection", spec_.projection,
                projection_loss(*strokes, spec_.paths, spec_.neighbors, stroke_grad, spec_.projection));
        }
        return out;
    }

private:
    void evaluate_features(const Canvas& canvas, LossValue& out, Canvas* canvas_grad) const {
        const auto feats = extractor_->extract(canvas);
        std::vector<FeatureMap> grads(feats.size());
        auto grad_slot = [&](std::size_t idx) -> FeatureMap& {
            if (grads[idx].empty()) grads[idx] = FeatureMap(feats[idx].h, feats[idx].w, feats[idx].c);
            return grads[idx];
        };
        if (spec_.content > 0.0) {
            double total = 0.0;
            for (std::size_t l = 0; l < spec_.content_layers.size(); ++l) {
                const auto idx = extractor_->layer_index(spec_.content_layers[l]);
                const double dist = feature_distance(feats[idx], content_targets_[l]);
                total += dist;
                if (canvas_grad && dist > 0.0) {
                    auto& g = grad_slot(idx);
                    const double k = spec_.content / dist;
                    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += k * (feats[idx].data[i] - content_targets_[l].data[i]);
                }
            }
            out.terms["content"] = spec_.content * total;
            out.total += spec_.content * total;
        }
        if (spec_.style > 0.0) {
            double total = 0.0;
            for (std::size_t l = 0; l < spec_.style_layers.size(); ++l) {
                const auto idx = extractor_->layer_index(spec_.style_layers[l]);
                const auto& f = feats[idx];
                const Matrix g_r = gram(f);
                const double dist = frobenius_distance(g_r, style_grams_[l]);
                const double n = f.c, m = static_cast<double>(f.positions());
                const double norm_k = style_weights_[l] / (n * n * m * m);
                total += norm_k * dist;
                if (canvas_grad && dist > 0.0 && style_weights_[l] > 0.0) {
                    // dE/dG = k (G_r - G_s) / |G_r - G_s|_F; dL/dF = 2 F dE/dG (dE/dG symmetric).
                    const double k = spec_.style * norm_k / dist;
                    auto& g = grad_slot(idx);
                    std::vector<double> dg(g_r.data.size());
                    for (std::size_t i = 0; i < dg.size(); ++i) dg[i] = k * (g_r.data[i] - style_grams_[l].data[i]);
                    for (std::size_t p = 0; p < f.positions(); ++p) {
                        const double* v = &f.data[p * f.c];
                        double* gv = &g.data[p * f.c];
                        for (int i = 0; i < f.c; ++i) {
                            const double* row = &dg[static_cast<std::size_t>(i) * f.c];
                            double acc = 0.0;
                            for (int j = 0; j < f.c; ++j) acc += row[j] * v[j];
                            gv[i] += 2.0 * acc;
                        }
                    }
                }
            }
            out.terms["style"] = spec_.style * total;
            out.total += spec_.style * total;
        }
        if (canvas_grad) {
            bool any = false;
            for (const auto& g : grads) any = any || !g.empty();
            if (any) {
                const Canvas g = extractor_->backward(canvas, grads);
                for (std::size_t i = 0; i < g.size(); ++i) canvas_grad->values()[i] += g.values()[i];
            }
        }
    }

    LossSpec spec_;
    LossTargets targets_;
    std::shared_ptr<const FeatureExtractor> extractor_;
    std::vector<FeatureMap> content_targets_;
    std::vector<Matrix> style_grams_;
    std::vector<double> style_weights_;
};

} // namespace brushfit
