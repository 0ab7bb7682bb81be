#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "canvas.hpp"
#include "diff.hpp"
#include "error.hpp"
#include "features.hpp"
#include "geometry.hpp"
#include "init.hpp"
#include "losses.hpp"
#include "renderer.hpp"

namespace brushfit {

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    double lr = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    std::vector<double> m;
    std::vector<double> v;

    AdamState() = default;
    AdamState(std::size_t n, double learning_rate) : lr(learning_rate), m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam update, in place.
inline void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads) {
    if (params.size() != grads.size()) throw DomainError("adam_step: parameter and gradient sizes differ");
    if (state.m.empty() && state.v.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw DomainError("adam_step: moment buffers do not match parameter shape");
    for (std::size_t i = 0; i < grads.size(); ++i)
        if (!std::isfinite(grads[i]))
            throw NumericalError("adam_step: non-finite gradient at index " + std::to_string(i), NumericalError::Where::Parameter, i,
                                 state.step);
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
}

// ---------------------------------------------------------------------------
// Configuration

struct FitConfig {
    int stroke_steps = 1000;
    int pixel_steps = 1000;
    double lr_strokes = 0.1;
    double lr_pixels = 0.01;
    int num_strokes = 5000;
    int canvas_size = 256;         // smallest side of the stroke-stage canvas; <= 0 keeps the input size
    int pixel_target_side = 1024;  // smallest side of the pixel-stage canvas
    RenderParams render;
    LossSpec stroke_loss = [] {
        LossSpec s;
        s.mse = 1.0;
        return s;
    }();
    LossSpec pixel_loss = [] {
        LossSpec s;
        s.style = 1.0;
        s.content = 1.0;
        s.tv = 1e-4;
        return s;
    }();
    InitOptions init;
    std::uint64_t seed = 0;
    int preview_every = 25;
    std::uint64_t extractor_seed = 2020;
    std::string extractor_weights;  // optional weight file; empty uses the random stack

    void validate() const {
        if (stroke_steps < 0 || pixel_steps < 0) throw ConfigError("step counts must be >= 0");
        if (num_strokes < 0) throw ConfigError("num_strokes must be >= 0");
        if (!(lr_strokes > 0.0) || !(lr_pixels > 0.0)) throw ConfigError("learning rates must be > 0");
        if (pixel_target_side <= 0) throw ConfigError("pixel_target_side must be > 0");
        if (preview_every < 1) throw ConfigError("preview_every must be >= 1");
        render.validate();
        stroke_loss.validate();
        pixel_loss.validate();
    }
};

inline std::shared_ptr<const FeatureExtractor> make_extractor(const FitConfig& config) {
    if (!config.extractor_weights.empty())
        return std::make_shared<ConvStackExtractor>(load_feature_weights(config.extractor_weights));
    return std::make_shared<ConvStackExtractor>(ConvStackExtractor::random(config.extractor_seed));
}

// ---------------------------------------------------------------------------
// Jobs

enum class JobStatus { Pending, Running, Done, Cancelled, Failed };

inline const char* to_string(JobStatus s) {
    switch (s) {
    case JobStatus::Pending: return "pending";
    case JobStatus::Running: return "running";
    case JobStatus::Done: return "done";
    case JobStatus::Cancelled: return "cancelled";
    case JobStatus::Failed: return "failed";
    }
    return "unknown";
}

/// Published after every step. `preview` is set only on cadence steps.
struct ProgressEvent {
    std::string stage;  // "strokes" or "pixels"
    long step = 0;      // completed steps across both stages
    double total_loss = 0.0;
    std::map<std::string, double> terms;
    std::shared_ptr<const Canvas> preview;
};

using ProgressSink = std::function<void(const ProgressEvent&)>;

/// Control paths queued for a running job.
struct PathUpdate {
    std::vector<ControlPath> paths;
    int neighbors = 30;
    double weight = 1.0;
};

/// Immutable copy of a job's observable state.
struct FitSnapshot {
    JobStatus status = JobStatus::Pending;
    std::string stage;
    long step = 0;
    long total_steps = 0;
    std::vector<double> history;
    std::map<std::string, double> terms;
    std::shared_ptr<const StrokeSet> strokes;
    std::shared_ptr<const Canvas> preview;
    std::string error;
    double elapsed_seconds = 0.0;
};

/// Configuration plus mutable optimization state. The optimizing thread
/// writes through record_*; any thread may snapshot(), cancel() or
/// inject_paths().
class FitJob {
public:
    FitJob(FitConfig config, Canvas content, std::optional<Canvas> style = std::nullopt)
        : config_(std::move(config)), content_(std::move(content)), style_(std::move(style)) {
        config_.validate();
    }

    const FitConfig& config() const { return config_; }
    const Canvas& content() const { return content_; }
    const std::optional<Canvas>& style() const { return style_; }

    void cancel() { cancel_.store(true); }
    bool cancel_requested() const { return cancel_.load(); }

    void inject_paths(PathUpdate update) {
        std::lock_guard lock(mutex_);
        if (is_finished(status_)) throw DomainError("job already finished");
        pending_paths_ = std::move(update);
        has_paths_ = true;
    }

    std::optional<PathUpdate> take_paths() {
        std::lock_guard lock(mutex_);
        if (!pending_paths_) return std::nullopt;
        auto out = std::move(pending_paths_);
        pending_paths_.reset();
        return out;
    }

    bool received_paths() const {
        std::lock_guard lock(mutex_);
        return has_paths_;
    }

    FitSnapshot snapshot() const {
        std::lock_guard lock(mutex_);
        FitSnapshot s = state_;
        s.status = status_;
        s.history = history_;
        s.elapsed_seconds = started_ ? std::chrono::duration<double>(std::chrono::steady_clock::now() - *started_).count() : 0.0;
        return s;
    }

    JobStatus status() const {
        std::lock_guard lock(mutex_);
        return status_;
    }

    std::vector<double> history() const {
        std::lock_guard lock(mutex_);
        return history_;
    }

    StrokeSet strokes() const {
        std::lock_guard lock(mutex_);
        return state_.strokes ? *state_.strokes : StrokeSet{};
    }

    // -- optimizer side --

    void set_status(JobStatus s) {
        std::lock_guard lock(mutex_);
        // pending -> running -> {done, cancelled, failed}
        if (is_finished(status_) || static_cast<int>(s) < static_cast<int>(status_)) return;
        status_ = s;
        if (s == JobStatus::Running && !started_) started_ = std::chrono::steady_clock::now();
    }

    void fail(const std::string& message) {
        {
            std::lock_guard lock(mutex_);
            state_.error = message;
        }
        set_status(JobStatus::Failed);
    }

    void set_total_steps(long total) {
        std::lock_guard lock(mutex_);
        state_.total_steps = total;
    }

    void publish_strokes(StrokeSet strokes, std::shared_ptr<const Canvas> preview = nullptr) {
        auto shared = std::make_shared<const StrokeSet>(std::move(strokes));
        std::lock_guard lock(mutex_);
        state_.strokes = std::move(shared);
        if (preview) state_.preview = std::move(preview);
    }

    void publish_preview(std::shared_ptr<const Canvas> preview) {
        std::lock_guard lock(mutex_);
        state_.preview = std::move(preview);
    }

    void record_step(const std::string& stage, const LossValue& loss) {
        std::lock_guard lock(mutex_);
        history_.push_back(loss.total);
        state_.step = static_cast<long>(history_.size());
        state_.stage = stage;
        state_.terms = loss.terms;
    }

    long completed_steps() const {
        std::lock_guard lock(mutex_);
        return static_cast<long>(history_.size());
    }

private:
    static bool is_finished(JobStatus s) {
        return s == JobStatus::Done || s == JobStatus::Cancelled || s == JobStatus::Failed;
    }

    FitConfig config_;
    Canvas content_;
    std::optional<Canvas> style_;

    mutable std::mutex mutex_;
    JobStatus status_ = JobStatus::Pending;
    FitSnapshot state_;
    std::vector<double> history_;
    std::optional<PathUpdate> pending_paths_;
    bool has_paths_ = false;
    std::optional<std::chrono::steady_clock::time_point> started_;
    std::atomic<bool> cancel_{false};
};

// ---------------------------------------------------------------------------
// Stage 1: stroke parameters

/// Runs config.stroke_steps Adam iterations on the job's current strokes.
/// Each step rebuilds the candidate index, applies queued control paths,
/// and projects parameters back into their bounds. Returns the final (or,
/// on cancellation, latest) strokes.
inline StrokeSet fit_strokes(FitJob& job, const LossEvaluator& loss, const ProgressSink& sink = {}) {
    const auto& cfg = job.config();
    StrokeSet set = job.strokes();
    if (set.canvas_h <= 0 || set.canvas_w <= 0) throw DomainError("fit_strokes: job has no initialized strokes");
    AdamState adam(set.size() * Brushstroke::kParams, cfg.lr_strokes);
    std::optional<LossEvaluator> steered;
    for (int step = 0; step < cfg.stroke_steps; ++step) {
        if (job.cancel_requested()) {
            job.set_status(JobStatus::Cancelled);
            break;
        }
        if (auto update = job.take_paths())
            steered = loss.with_paths(std::move(update->paths), update->neighbors, update->weight);
        const LossEvaluator& active = steered ? *steered : loss;

        RenderLossResult r;
        if (set.empty()) {
            r = grad_render_loss(set, cfg.render, active, nullptr, nullptr, job.completed_steps());
        } else {
            const auto index = build_nearest_index(set, cfg.render.neighbors, cfg.render.coarse_factor);
            r = grad_render_loss(set, cfg.render, active, &index, nullptr, job.completed_steps());
            auto flat = set.flatten();
            adam_step(adam, flat, r.grad.values);
            set.unflatten(flat);
            clamp_strokes(set);
        }
        job.record_step("strokes", r.loss);
        const bool cadence = (step + 1) % cfg.preview_every == 0 || step + 1 == cfg.stroke_steps;
        std::shared_ptr<const Canvas> preview;
        if (cadence) preview = std::make_shared<const Canvas>(std::move(r.rendered));
        job.publish_strokes(set, preview);
        if (sink) sink(ProgressEvent{"strokes", job.completed_steps(), r.loss.total, r.loss.terms, preview});
    }
    return set;
}

// ---------------------------------------------------------------------------
// Stage 2: pixels

/// Adam on raw pixel values with clamping to [0, 1] after every step.
inline Canvas refine_pixels(const Canvas& canvas, const FitConfig& config, const LossEvaluator& loss, FitJob* job = nullptr,
                            const ProgressSink& sink = {}) {
    Canvas current = canvas;
    AdamState adam(current.size(), config.lr_pixels);
    const long offset = job ? job->completed_steps() : 0;
    for (int step = 0; step < config.pixel_steps; ++step) {
        if (job && job->cancel_requested()) {
            job->set_status(JobStatus::Cancelled);
            break;
        }
        const auto r = grad_pixel_loss(current, loss, offset + step);
        adam_step(adam, current.values(), r.grad.values());
        current.clamp01();
        if (job) job->record_step("pixels", r.loss);
        const bool cadence = (step + 1) % config.preview_every == 0 || step + 1 == config.pixel_steps;
        std::shared_ptr<const Canvas> preview;
        if (cadence) {
            preview = std::make_shared<const Canvas>(current);
            if (job) job->publish_preview(preview);
        }
        if (sink) sink(ProgressEvent{"pixels", offset + step + 1, r.loss.total, r.loss.terms, preview});
    }
    return current;
}

// ---------------------------------------------------------------------------
// Full pipeline

struct FitResult {
    StrokeSet strokes;
    Canvas canvas;
};

/// Loss for the stroke stage: the reference is the (resized) content
/// image, the style target the style image resized to the same canvas.
inline LossEvaluator make_stroke_loss(const FitConfig& cfg, const Canvas& content, const std::optional<Canvas>& style,
                                      std::shared_ptr<const FeatureExtractor> extractor = nullptr) {
    LossTargets targets;
    targets.reference = content;
    if (style) targets.style = resize(*style, content.height(), content.width());
    if (cfg.stroke_loss.uses_features() && !extractor) extractor = make_extractor(cfg);
    return LossEvaluator(cfg.stroke_loss, std::move(targets), std::move(extractor));
}

/// init -> fit_strokes -> render, then (with a style image) pixel refinement
/// using the stroke rendering as content image. Without a style image this
/// is pure reconstruction and the pixel stage is skipped.
inline FitResult fit_image(FitJob& job, const ProgressSink& sink = {}) {
    const auto& cfg = job.config();
    try {
        job.set_status(JobStatus::Running);
        const bool stylize = job.style().has_value();
        if (!stylize && (cfg.stroke_loss.style > 0.0)) throw ConfigError("style loss requested without a style image");

        Canvas content = job.content();
        if (cfg.canvas_size > 0) {
            const auto [h, w] = dims_for_short_side(content.height(), content.width(), cfg.canvas_size);
            content = resize(content, h, w);
        }
        const bool pixel_stage = stylize && cfg.pixel_steps > 0;
        job.set_total_steps(cfg.stroke_steps + (pixel_stage ? cfg.pixel_steps : 0));

        StrokeSet init = initialize_strokes(content, cfg.num_strokes, cfg.seed, cfg.init);
        job.publish_strokes(init, std::make_shared<const Canvas>(render(init, cfg.render)));

        std::shared_ptr<const FeatureExtractor> extractor;
        if (cfg.stroke_loss.uses_features() || (pixel_stage && cfg.pixel_loss.uses_features())) extractor = make_extractor(cfg);

        const auto stroke_loss = make_stroke_loss(cfg, content, job.style(), extractor);
        FitResult result;
        result.strokes = fit_strokes(job, stroke_loss, sink);
        result.canvas = render(result.strokes, cfg.render);

        if (pixel_stage && !job.cancel_requested()) {
            const auto [h, w] = dims_for_short_side(result.canvas.height(), result.canvas.width(), cfg.pixel_target_side);
            const Canvas upsampled = resize(result.canvas, h, w);
            LossTargets targets;
            targets.reference = upsampled;
            targets.style = resize(*job.style(), h, w);
            const LossEvaluator pixel_loss(cfg.pixel_loss, std::move(targets), extractor);
            result.canvas = refine_pixels(upsampled, cfg, pixel_loss, &job, sink);
        }
        job.publish_preview(std::make_shared<const Canvas>(result.canvas));
        job.set_status(job.cancel_requested() ? JobStatus::Cancelled : JobStatus::Done);
        return result;
    } catch (const std::exception& e) {
        job.fail(e.what());
        throw;
    }
}

/// Convenience wrapper running a private job.
inline FitResult fit_image(const Canvas& content, const std::optional<Canvas>& style, const FitConfig& config,
                           const ProgressSink& sink = {}) {
    FitJob job(config, content, style);
    return fit_image(job, sink);
}

} // namespace brushfit
