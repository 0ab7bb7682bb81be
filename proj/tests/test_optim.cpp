#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "brushfit/optim.hpp"
#include "support/scenes.hpp"

using namespace brushfit;
using namespace brushfit::fixtures;

namespace {

Canvas two_color(int h, int w) {
    Canvas c(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const Rgb v = x < w / 2 ? Rgb{0.9, 0.2, 0.1} : Rgb{0.1, 0.3, 0.8};
            for (int k = 0; k < 3; ++k) c.at(y, x, k) = v[k];
        }
    return c;
}

FitConfig small_config(int strokes, int steps) {
    FitConfig cfg;
    cfg.num_strokes = strokes;
    cfg.stroke_steps = steps;
    cfg.pixel_steps = 0;
    cfg.canvas_size = 0;
    cfg.preview_every = 10;
    return cfg;
}

LossEvaluator mse_to(const Canvas& target) {
    LossSpec s;
    s.mse = 1;
    return LossEvaluator(s, LossTargets{target, std::nullopt});
}

struct StrokeRun {
    StrokeSet init;
    StrokeSet fitted;
    std::vector<double> history;
    JobStatus status;
};

StrokeRun run_strokes(const FitConfig& cfg, const Canvas& target, const StrokeSet& init, const ProgressSink& sink = {},
                      FitJob** out_job = nullptr) {
    FitJob job(cfg, target);
    if (out_job) *out_job = &job;
    job.publish_strokes(init);
    job.set_status(JobStatus::Running);
    StrokeRun r{init, fit_strokes(job, mse_to(target), sink), {}, JobStatus::Pending};
    r.history = job.history();
    r.status = job.status();
    return r;
}

} // namespace

// ---------------------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParameters) {
    AdamState st(3, 0.1);
    std::vector<double> p{1, -2, 3};
    const std::vector<double> g(3, 0.0);
    for (int i = 0; i < 20; ++i) adam_step(st, p, g);
    EXPECT_EQ(p, (std::vector<double>{1, -2, 3}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
    for (double g : {1e-3, 0.5, 40.0, -7.0}) {
        AdamState st(1, 0.05);
        std::vector<double> p{2.0};
        adam_step(st, p, std::vector<double>{g});
        EXPECT_NEAR(p[0], 2.0 - 0.05 * (g > 0 ? 1 : -1), 1e-6);
    }
}

TEST(Adam, MatchesReferenceTrace) {
    // Reference values from an independent evaluation of the update rule.
    AdamState a(1, 0.1);
    std::vector<double> p{0.0};
    adam_step(a, p, std::vector<double>{1.0});
    EXPECT_NEAR(p[0], -0.09999999900000002, 1e-15);
    adam_step(a, p, std::vector<double>{1.0});
    EXPECT_NEAR(p[0], -0.19999999799999935, 1e-15);

    AdamState b(1, 0.1);
    p = {2.0};
    adam_step(b, p, std::vector<double>{1.0});
    adam_step(b, p, std::vector<double>{0.5});
    EXPECT_NEAR(p[0], 1.8067820382981612, 1e-14);

    AdamState c(1, 0.05);
    p = {-1.0};
    const double want[] = {-0.9500000001666666, -0.9427739737091886, -0.9394128810888385};
    const double gs[] = {-3, 2, 0.25};
    for (int i = 0; i < 3; ++i) {
        adam_step(c, p, std::vector<double>{gs[i]});
        EXPECT_NEAR(p[0], want[i], 1e-14);
    }
}

TEST(Adam, RejectsNonFiniteGradient) {
    AdamState st(2, 0.1);
    std::vector<double> p{0, 0};
    try {
        adam_step(st, p, std::vector<double>{0.0, std::nan("")});
        FAIL();
    } catch (const NumericalError& e) {
        EXPECT_EQ(e.index(), 1u);
        EXPECT_EQ(e.where(), NumericalError::Where::Parameter);
    }
    EXPECT_EQ(p, (std::vector<double>{0, 0}));
}

TEST(Adam, RejectsShapeMismatch) {
    AdamState st(2, 0.1);
    std::vector<double> p{0, 0, 0};
    EXPECT_THROW(adam_step(st, p, std::vector<double>{0, 0, 0}), DomainError);
    EXPECT_THROW(adam_step(st, p, std::vector<double>{0, 0}), DomainError);
}

// ---------------------------------------------------------------------------

TEST(FitConfig, Validation) {
    FitConfig c;
    EXPECT_NO_THROW(c.validate());
    c.stroke_steps = -1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.lr_strokes = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.preview_every = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.render.samples = 1;
    EXPECT_THROW(FitJob(c, Canvas(4, 4)), ConfigError);
}

TEST(FitStrokes, ReducesErrorOnTwoColorTarget) {
    const auto target = two_color(64, 64);
    const auto init = random_init(50, target, 3);
    const auto r = run_strokes(small_config(50, 300), target, init);
    const double before = mse(render(init, RenderParams{}), target);
    const double after = mse(render(r.fitted, RenderParams{}), target);
    EXPECT_LE(after, 0.2 * before) << before << " -> " << after;
    EXPECT_EQ(r.history.size(), 300u);
    EXPECT_EQ(r.status, JobStatus::Running);
}

TEST(FitStrokes, ZeroStepsReturnsInitialization) {
    const auto target = two_color(24, 24);
    const auto init = random_init(10, target, 1);
    const auto r = run_strokes(small_config(10, 0), target, init);
    EXPECT_EQ(r.fitted.flatten(), init.flatten());
    EXPECT_TRUE(r.history.empty());
}

TEST(FitStrokes, Deterministic) {
    const auto target = random_canvas(4, 32, 32);
    const auto init = random_init(20, target, 4);
    const auto a = run_strokes(small_config(20, 40), target, init);
    const auto b = run_strokes(small_config(20, 40), target, init);
    EXPECT_EQ(a.history, b.history);
    EXPECT_EQ(a.fitted.flatten(), b.fitted.flatten());
}

TEST(FitStrokes, ParametersStayInBounds) {
    const auto target = random_canvas(5, 24, 30);
    auto cfg = small_config(15, 60);
    cfg.lr_strokes = 2.0;  // large steps push against every bound
    const auto bounds = ClampBounds::for_canvas(24, 30);
    const auto r = run_strokes(cfg, target, random_init(15, target, 5), [&](const ProgressEvent&) {});
    for (const auto& s : r.fitted.strokes) EXPECT_TRUE(bounds.contains(s));
}

TEST(FitStrokes, HistoryAndEventsPerStep) {
    const auto target = two_color(20, 20);
    std::vector<ProgressEvent> events;
    const auto r = run_strokes(small_config(8, 25), target, random_init(8, target, 6),
                               [&](const ProgressEvent& e) { events.push_back(e); });
    ASSERT_EQ(events.size(), 25u);
    for (std::size_t i = 0; i < events.size(); ++i) {
        EXPECT_EQ(events[i].step, static_cast<long>(i + 1));
        EXPECT_EQ(events[i].stage, "strokes");
        EXPECT_EQ(events[i].total_loss, r.history[i]);
        // previews on every 10th step and the last one
        EXPECT_EQ(events[i].preview != nullptr, (i + 1) % 10 == 0 || i + 1 == 25);
    }
}

TEST(FitStrokes, CancellationStopsAtNextStep) {
    const auto target = two_color(20, 20);
    FitJob* job = nullptr;
    const auto r = run_strokes(
        small_config(8, 100), target, random_init(8, target, 7),
        [&](const ProgressEvent& e) {
            if (e.step == 10) job->cancel();
        },
        &job);
    EXPECT_EQ(r.history.size(), 10u);
    EXPECT_EQ(r.status, JobStatus::Cancelled);
}

TEST(FitStrokes, InjectedPathsChangeTrajectory) {
    const auto target = random_canvas(8, 32, 32);
    const auto init = random_init(20, target, 8);
    const auto cfg = small_config(20, 30);
    const auto plain = run_strokes(cfg, target, init);
    FitJob* job = nullptr;
    const auto steered = run_strokes(
        cfg, target, init,
        [&](const ProgressEvent& e) {
            if (e.step == 10) job->inject_paths(PathUpdate{{diagonal_path(32, 32)}, 5, 1.0});
        },
        &job);
    // the update is picked up by step 11
    for (int i = 0; i < 10; ++i) EXPECT_EQ(plain.history[i], steered.history[i]);
    EXPECT_NE(plain.history[10], steered.history[10]);
}

TEST(FitStrokes, RequiresInitializedStrokes) {
    FitJob job(small_config(4, 3), Canvas(8, 8));
    EXPECT_THROW(fit_strokes(job, mse_to(Canvas(8, 8))), DomainError);
}

// ---------------------------------------------------------------------------

TEST(RefinePixels, MseAgainstSelfIsStationary) {
    const auto c = random_canvas(9, 16, 16);
    auto cfg = small_config(0, 0);
    cfg.pixel_steps = 20;
    EXPECT_EQ(refine_pixels(c, cfg, mse_to(c)), c);
}

TEST(RefinePixels, TvOnlyDecreases) {
    const auto noise = random_canvas(10, 24, 24);
    auto cfg = small_config(0, 0);
    cfg.pixel_steps = 50;
    LossSpec s;
    s.tv = 1;
    const LossEvaluator ev(s, {});
    FitJob job(cfg, noise);
    const auto out = refine_pixels(noise, cfg, ev, &job);
    const auto h = job.history();
    ASSERT_EQ(h.size(), 50u);
    EXPECT_LT(h.back(), 0.5 * h.front());
    EXPECT_LT(ev.evaluate(out, nullptr, nullptr).total, h.back());
    for (double v : out.values()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(RefinePixels, Deterministic) {
    const auto c = random_canvas(11, 12, 12);
    auto cfg = small_config(0, 0);
    cfg.pixel_steps = 15;
    LossSpec s;
    s.mse = 1;
    s.tv = 0.1;
    const LossEvaluator ev(s, {random_canvas(12, 12, 12), std::nullopt});
    EXPECT_EQ(refine_pixels(c, cfg, ev), refine_pixels(c, cfg, ev));
}

// ---------------------------------------------------------------------------

TEST(FitImage, FlatColorReconstruction) {
    const Canvas flat(32, 32, Rgb{0.2, 0.6, 0.4});
    auto cfg = small_config(10, 150);
    const auto r = fit_image(flat, std::nullopt, cfg);
    EXPECT_EQ(r.strokes.size(), 10u);
    EXPECT_LE(mse(r.canvas, flat), 1e-2);
}

TEST(FitImage, ResizesToCanvasSize) {
    const auto img = random_canvas(13, 40, 60);
    auto cfg = small_config(6, 2);
    cfg.canvas_size = 20;
    const auto r = fit_image(img, std::nullopt, cfg);
    EXPECT_EQ(r.canvas.height(), 20);
    EXPECT_EQ(r.canvas.width(), 30);
    EXPECT_EQ(r.strokes.canvas_h, 20);
}

TEST(FitImage, StatusTransitionsAreMonotone) {
    const auto img = two_color(16, 16);
    FitJob job(small_config(5, 12), img);
    EXPECT_EQ(job.status(), JobStatus::Pending);
    std::vector<JobStatus> seen;
    fit_image(job, [&](const ProgressEvent&) { seen.push_back(job.status()); });
    for (auto s : seen) EXPECT_EQ(s, JobStatus::Running);
    EXPECT_EQ(job.status(), JobStatus::Done);
    job.set_status(JobStatus::Running);
    EXPECT_EQ(job.status(), JobStatus::Done);
    EXPECT_THROW(job.inject_paths(PathUpdate{}), DomainError);
    const auto snap = job.snapshot();
    EXPECT_EQ(snap.step, 12);
    EXPECT_EQ(snap.total_steps, 12);
    EXPECT_EQ(snap.history.size(), 12u);
    ASSERT_TRUE(snap.preview);
}

TEST(FitImage, StylizeRunsBothStages) {
    const auto content = random_canvas(14, 16, 16);
    const auto style = two_color(20, 24);
    auto cfg = small_config(8, 5);
    cfg.pixel_steps = 4;
    cfg.pixel_target_side = 24;
    cfg.stroke_loss = {};
    cfg.stroke_loss.mse = 1;
    cfg.stroke_loss.style = 1;
    FitJob job(cfg, content, style);
    std::vector<std::string> stages;
    const auto r = fit_image(job, [&](const ProgressEvent& e) { stages.push_back(e.stage); });
    EXPECT_EQ(job.status(), JobStatus::Done);
    ASSERT_EQ(stages.size(), 9u);
    EXPECT_EQ(std::count(stages.begin(), stages.end(), "strokes"), 5);
    EXPECT_EQ(stages.back(), "pixels");
    EXPECT_EQ(r.canvas.height(), 24);
    EXPECT_EQ(r.canvas.width(), 24);
    EXPECT_EQ(job.snapshot().total_steps, 9);
}

TEST(FitImage, StyleLossWithoutStyleImageFails) {
    auto cfg = small_config(4, 2);
    cfg.stroke_loss.style = 1;
    FitJob job(cfg, Canvas(8, 8));
    EXPECT_THROW(fit_image(job), ConfigError);
    EXPECT_EQ(job.status(), JobStatus::Failed);
    EXPECT_FALSE(job.snapshot().error.empty());
}

TEST(FitImage, SmoothedLossDescends) {
    // 50-step moving average, compared across 500-step windows
    const auto img = resize(random_canvas(15, 16, 16), 48, 48);
    auto cfg = small_config(60, 700);
    FitJob job(cfg, img);
    fit_image(job);
    const auto h = job.history();
    std::vector<double> avg;
    for (std::size_t i = 50; i <= h.size(); ++i) avg.push_back(std::accumulate(h.begin() + i - 50, h.begin() + i, 0.0) / 50);
    for (std::size_t i = 0; i + 500 < avg.size(); ++i) EXPECT_LE(avg[i + 500], avg[i]) << "window at " << i;
}
