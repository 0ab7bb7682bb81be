// brushfit command-line interface.
//
//   brushfit fit      --content IMG [--config CFG] --out strokes.json [--preview out.png]
//   brushfit render   --strokes strokes.json --out img.png
//   brushfit stylize  --content IMG --style IMG [--config CFG] --out img.png
//   brushfit flow     --content IMG --paths paths.json [--L 30] --out strokes.json
//   brushfit serve    --port P [--max-jobs 2]
//
// Exit codes: 0 success, 1 runtime error, 2 configuration or input error.

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "brushfit/brushfit.hpp"
#include "brushfit/service.hpp"

namespace fs = std::filesystem;
using namespace brushfit;

namespace {

struct Options {
    std::optional<std::uint64_t> seed;
    std::string config;
    std::string content;
    std::string style;
    std::string strokes;
    std::string out;
    std::string preview;
    std::string preview_dir;
    std::string history;
    std::string strokes_out;
    std::string paths;
    std::optional<int> neighbors;
    std::optional<double> path_weight;
    std::optional<int> num_strokes;
    std::optional<int> steps;
    std::optional<int> pixel_steps;
    std::string host = "127.0.0.1";
    int port = 8080;
    int max_jobs = 2;
    std::string persist_dir;
    bool quiet = false;
};

// Input problems are reported as configuration errors (exit 2).
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

RunConfig load_config(const Options& o, RunMode mode) {
    RunConfig rc;
    if (!o.config.empty()) {
        rc = load_run_config(o.config, mode);
    } else {
        rc.fit.stroke_loss = default_stroke_loss(mode);
    }
    if (o.seed) rc.fit.seed = *o.seed;
    if (o.num_strokes) rc.fit.num_strokes = *o.num_strokes;
    if (o.steps) rc.fit.stroke_steps = *o.steps;
    if (o.pixel_steps) rc.fit.pixel_steps = *o.pixel_steps;
    if (!o.content.empty()) rc.content = o.content;
    if (!o.style.empty()) rc.style = o.style;
    if (!o.paths.empty()) rc.paths = o.paths;
    rc.fit.validate();
    return rc;
}

Canvas load_input(const std::optional<std::string>& path, const char* what) {
    if (!path) throw ConfigError(std::string("--") + what + " is required");
    try {
        return load_image(*path);
    } catch (const IoError& e) {
        throw InputError(e.what());
    }
}

ProgressSink make_sink(const Options& o) {
    if (!o.preview_dir.empty()) fs::create_directories(o.preview_dir);
    return [&o](const ProgressEvent& e) {
        if (e.preview && !o.preview_dir.empty()) {
            char name[64];
            std::snprintf(name, sizeof name, "%s_%06ld.png", e.stage.c_str(), e.step);
            save_image(*e.preview, (fs::path(o.preview_dir) / name).string());
        }
        if (!o.quiet && e.preview) std::cerr << e.stage << " step " << e.step << " loss " << e.total_loss << "\n";
    };
}

void write_history(const std::string& path, const std::vector<double>& history) {
    if (path.empty()) return;
    json doc = history;
    write_file(path, doc.dump() + "\n");
}

int run_fit(const Options& o, bool flow) {
    auto rc = load_config(o, RunMode::Reconstruct);
    auto& cfg = rc.fit;
    if (flow) {
        if (!rc.paths) throw ConfigError("--paths is required for flow");
        cfg.stroke_loss.projection = o.path_weight.value_or(cfg.stroke_loss.projection > 0 ? cfg.stroke_loss.projection : 1.0);
        if (o.neighbors) cfg.stroke_loss.neighbors = *o.neighbors;
    } else if (o.neighbors || rc.paths) {
        throw ConfigError("--L and --paths apply to flow and stylize only");
    }
    if (o.out.empty()) throw ConfigError("--out is required");
    const Canvas content = load_input(rc.content, "content");
    std::vector<ControlPath> paths;
    if (flow) {
        try {
            paths = load_paths(*rc.paths);
        } catch (const IoError& e) {
            throw InputError(e.what());
        }
    }

    FitJob job(cfg, content);
    if (flow) job.inject_paths(PathUpdate{paths, cfg.stroke_loss.neighbors, cfg.stroke_loss.projection});
    const auto result = fit_image(job, make_sink(o));
    save_strokes(result.strokes, o.out);
    if (!o.preview.empty()) save_image(result.canvas, o.preview);
    write_history(o.history, job.history());
    return 0;
}

int run_render(const Options& o) {
    if (o.strokes.empty()) throw ConfigError("--strokes is required");
    if (o.out.empty()) throw ConfigError("--out is required");
    RenderParams params;
    if (!o.config.empty()) params = load_run_config(o.config).fit.render;
    StrokeSet set;
    try {
        set = load_strokes(o.strokes);
    } catch (const IoError& e) {
        throw InputError(e.what());
    }
    save_image(render(set, params), o.out);
    return 0;
}

int run_stylize(const Options& o) {
    auto rc = load_config(o, RunMode::Stylize);
    auto& cfg = rc.fit;
    if (o.neighbors && !rc.paths) throw ConfigError("--L requires --paths");
    if (o.out.empty()) throw ConfigError("--out is required");
    const Canvas content = load_input(rc.content, "content");
    const Canvas style = load_input(rc.style, "style");
    std::vector<ControlPath> paths;
    if (rc.paths) {
        try {
            paths = load_paths(*rc.paths);
        } catch (const IoError& e) {
            throw InputError(e.what());
        }
        if (o.neighbors) cfg.stroke_loss.neighbors = *o.neighbors;
        cfg.stroke_loss.projection = o.path_weight.value_or(cfg.stroke_loss.projection > 0 ? cfg.stroke_loss.projection : 1.0);
    }
    FitJob job(cfg, content, style);
    if (rc.paths) job.inject_paths(PathUpdate{paths, cfg.stroke_loss.neighbors, cfg.stroke_loss.projection});
    const auto result = fit_image(job, make_sink(o));
    save_image(result.canvas, o.out);
    if (!o.strokes_out.empty()) save_strokes(result.strokes, o.strokes_out);
    write_history(o.history, job.history());
    return 0;
}

Service* active_service = nullptr;

int run_serve(const Options& o) {
    ServiceOptions so;
    so.max_jobs = o.max_jobs;
    so.persist_dir = o.persist_dir;
    Service service(so);
    if (!service.bind(o.host, o.port)) {
        std::cerr << "brushfit: cannot bind " << o.host << ":" << o.port << "\n";
        return 1;
    }
    active_service = &service;
    std::signal(SIGINT, [](int) {
        if (active_service) active_service->stop();
    });
    std::signal(SIGTERM, [](int) {
        if (active_service) active_service->stop();
    });
    std::cerr << "listening on http://" << o.host << ":" << o.port << "\n";
    service.listen_after_bind();
    active_service = nullptr;
    return 0;
}

void add_common(CLI::App* cmd, Options& o) {
    cmd->add_option("--seed", o.seed, "Random seed");
    cmd->add_flag("-q,--quiet", o.quiet, "Suppress progress output");
}

void add_fit_options(CLI::App* cmd, Options& o) {
    cmd->add_option("--content", o.content, "Content image (PNG or PPM)");
    cmd->add_option("--config", o.config, "Run configuration (JSON)");
    cmd->add_option("--out", o.out, "Output path");
    cmd->add_option("--preview", o.preview, "Write the final render to this image");
    cmd->add_option("--preview-dir", o.preview_dir, "Write a frame at every preview step");
    cmd->add_option("--history", o.history, "Write the per-step loss history (JSON)");
    cmd->add_option("--strokes-count,-n", o.num_strokes, "Number of strokes");
    cmd->add_option("--steps", o.steps, "Stroke optimization steps");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Fit images with differentiable brushstrokes"};
    app.require_subcommand(1);
    Options o;

    auto* fit = app.add_subcommand("fit", "Reconstruct an image with strokes");
    add_common(fit, o);
    add_fit_options(fit, o);

    auto* render_cmd = app.add_subcommand("render", "Render a stroke set");
    add_common(render_cmd, o);
    render_cmd->add_option("--strokes", o.strokes, "Stroke set (JSON)");
    render_cmd->add_option("--config", o.config, "Run configuration; only the render section is used");
    render_cmd->add_option("--out", o.out, "Output image");

    auto* stylize = app.add_subcommand("stylize", "Paint the content image in the style of another");
    add_common(stylize, o);
    add_fit_options(stylize, o);
    stylize->add_option("--style", o.style, "Style image");
    stylize->add_option("--strokes-out", o.strokes_out, "Write the fitted strokes (JSON)");
    stylize->add_option("--pixel-steps", o.pixel_steps, "Pixel refinement steps");
    stylize->add_option("--paths", o.paths, "Control paths (JSON list of polylines)");
    stylize->add_option("--L", o.neighbors, "Strokes steered per path point");
    stylize->add_option("--path-weight", o.path_weight, "Projection loss weight");

    auto* flow = app.add_subcommand("flow", "Reconstruct with stroke directions steered by control paths");
    add_common(flow, o);
    add_fit_options(flow, o);
    flow->add_option("--paths", o.paths, "Control paths (JSON list of polylines)");
    flow->add_option("--L", o.neighbors, "Strokes steered per path point");
    flow->add_option("--path-weight", o.path_weight, "Projection loss weight");

    auto* serve = app.add_subcommand("serve", "Start the HTTP job service");
    add_common(serve, o);
    serve->add_option("--port", o.port, "Port");
    serve->add_option("--host", o.host, "Interface to bind");
    serve->add_option("--max-jobs", o.max_jobs, "Concurrently running jobs");
    serve->add_option("--persist-dir", o.persist_dir, "Directory for finished job artifacts");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*fit) return run_fit(o, false);
        if (*render_cmd) return run_render(o);
        if (*stylize) return run_stylize(o);
        if (*flow) return run_fit(o, true);
        if (*serve) return run_serve(o);
    } catch (const ConfigError& e) {
        std::cerr << "brushfit: config error: " << e.what() << "\n";
        return 2;
    } catch (const InputError& e) {
        std::cerr << "brushfit: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "brushfit: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
