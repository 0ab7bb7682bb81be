#pragma once

// HTTP job service: submit images, steer running jobs with control paths,
// and follow progress over server-sent events.

#include <httplib.h>

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "canvas.hpp"
#include "error.hpp"
#include "io.hpp"
#include "optim.hpp"

namespace brushfit {

struct ServiceOptions {
    int max_jobs = 2;                 // concurrently running jobs
    std::string persist_dir;          // strokes.json + final.png per finished job; empty disables
    int preview_max_side = 512;
    int path_window = 3;              // Q, points averaged per tangent
};

/// Progress record emitted at every preview cadence step.
struct ProgressRecord {
    long step = 0;
    double total_loss = 0.0;
    std::string stage;
};

struct JobRecord {
    std::string id;
    std::shared_ptr<FitJob> job;
    std::chrono::system_clock::time_point created;

    mutable std::mutex mutex;
    std::condition_variable changed;
    std::chrono::system_clock::time_point updated;
    std::vector<ProgressRecord> events;
    bool finished = false;
    std::thread worker;
};

class Service {
public:
    explicit Service(ServiceOptions options = {}) : options_(std::move(options)) {
        if (options_.max_jobs < 1) throw ConfigError("max_jobs must be >= 1");
        std::random_device rd;
        rng_.seed((static_cast<std::uint64_t>(rd()) << 32) ^ rd());
        routes();
    }

    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    ~Service() { shutdown(); }

    httplib::Server& server() { return server_; }

    /// Binds to a free port on host and returns it.
    int bind_any(const std::string& host = "127.0.0.1") { return server_.bind_to_any_port(host); }
    bool bind(const std::string& host, int port) { return server_.bind_to_port(host, port); }
    bool listen_after_bind() { return server_.listen_after_bind(); }
    bool listen(const std::string& host, int port) { return server_.listen(host, port); }

    void stop() { server_.stop(); }

    /// Stops the server, cancels every job and joins worker threads.
    void shutdown() {
        server_.stop();
        std::vector<std::shared_ptr<JobRecord>> records;
        {
            std::lock_guard lock(mutex_);
            for (auto& [_, r] : jobs_) records.push_back(r);
        }
        for (auto& r : records) r->job->cancel();
        for (auto& r : records)
            if (r->worker.joinable()) r->worker.join();
    }

    std::shared_ptr<JobRecord> find(const std::string& id) const {
        std::lock_guard lock(mutex_);
        auto it = jobs_.find(id);
        return it == jobs_.end() ? nullptr : it->second;
    }

    /// Creates and starts a job; null when max_jobs are already running.
    std::shared_ptr<JobRecord> start(FitConfig config, Canvas content, std::optional<Canvas> style) {
        auto record = std::make_shared<JobRecord>();
        record->job = std::make_shared<FitJob>(std::move(config), std::move(content), std::move(style));
        record->created = record->updated = std::chrono::system_clock::now();
        std::lock_guard lock(mutex_);
        if (running_locked() >= options_.max_jobs) return nullptr;
        record->id = next_id();
        jobs_[record->id] = record;
        record->worker = std::thread([this, raw = record.get()] { run(*raw); });
        return record;
    }

private:
    int running_locked() const {
        int n = 0;
        for (const auto& [_, r] : jobs_) {
            std::lock_guard lock(r->mutex);
            n += r->finished ? 0 : 1;
        }
        return n;
    }

    std::string next_id() {
        std::ostringstream os;
        os << std::hex << std::setw(16) << std::setfill('0') << rng_();
        return os.str();
    }

    void run(JobRecord& r) {
        auto sink = [&r](const ProgressEvent& e) {
            if (!e.preview) return;
            std::lock_guard lock(r.mutex);
            r.events.push_back({e.step, e.total_loss, e.stage});
            r.updated = std::chrono::system_clock::now();
            r.changed.notify_all();
        };
        try {
            fit_image(*r.job, sink);
        } catch (const std::exception&) {
            // recorded on the job by fit_image
        }
        persist(r);
        std::lock_guard lock(r.mutex);
        r.finished = true;
        r.updated = std::chrono::system_clock::now();
        r.changed.notify_all();
    }

    void persist(const JobRecord& r) const {
        if (options_.persist_dir.empty()) return;
        try {
            const auto dir = std::filesystem::path(options_.persist_dir) / r.id;
            std::filesystem::create_directories(dir);
            const auto snap = r.job->snapshot();
            if (snap.strokes) save_strokes(*snap.strokes, (dir / "strokes.json").string());
            if (snap.preview) save_image(*snap.preview, (dir / "final.png").string());
        } catch (const std::exception&) {
            // persistence is best effort
        }
    }

    static void send_json(httplib::Response& res, int status, const json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    static void send_error(httplib::Response& res, int status, const std::string& message) {
        send_json(res, status, json{{"error", message}});
    }

    std::shared_ptr<JobRecord> lookup(const httplib::Request& req, httplib::Response& res) const {
        auto r = find(req.path_params.at("id"));
        if (!r) send_error(res, 404, "unknown job");
        return r;
    }

    static std::optional<double> eta_seconds(const FitSnapshot& s) {
        if (s.step <= 0 || s.total_steps <= 0 || s.status != JobStatus::Running) return std::nullopt;
        return s.elapsed_seconds / static_cast<double>(s.step) * static_cast<double>(std::max(0L, s.total_steps - s.step));
    }

    void routes() {
        server_.Post("/jobs", [this](const httplib::Request& req, httplib::Response& res) { submit(req, res); });

        server_.Post("/jobs/:id/paths", [this](const httplib::Request& req, httplib::Response& res) {
            auto r = lookup(req, res);
            if (!r) return;
            PathUpdate update;
            json echo;
            try {
                const json body = json::parse(req.body);
                detail::reject_unknown(body, {"paths", "L", "weight"}, "");
                if (!body.contains("paths")) throw ConfigError("paths: required");
                update.paths = control_paths(polylines_from_json(body["paths"]), options_.path_window);
                if (body.contains("L")) update.neighbors = detail::get_int(body, "L", "");
                if (body.contains("weight")) update.weight = detail::get_number(body, "weight", "");
                if (update.neighbors < 1) throw ConfigError("L: must be >= 1");
                if (!(update.weight >= 0.0)) throw ConfigError("weight: must be >= 0");
                echo = json{{"tangents", tangents_to_json(update.paths)}, {"L", update.neighbors}, {"weight", update.weight}};
            } catch (const json::exception& e) {
                return send_error(res, 400, e.what());
            } catch (const ConfigError& e) {
                return send_error(res, 400, e.what());
            }
            try {
                r->job->inject_paths(std::move(update));
            } catch (const DomainError& e) {
                return send_error(res, 409, e.what());
            }
            send_json(res, 200, echo);
        });

        server_.Get("/jobs/:id/status", [this](const httplib::Request& req, httplib::Response& res) {
            auto r = lookup(req, res);
            if (!r) return;
            const auto s = r->job->snapshot();
            json losses = json::object();
            if (!s.history.empty()) losses["total"] = s.history.back();
            for (const auto& [k, v] : s.terms) losses[k] = v;
            json body{{"id", r->id},       {"status", to_string(s.status)}, {"stage", s.stage},
                      {"step", s.step},    {"total_steps", s.total_steps},  {"losses", losses},
                      {"eta_seconds", nullptr}};
            if (const auto eta = eta_seconds(s)) body["eta_seconds"] = *eta;
            if (!s.error.empty()) body["error"] = s.error;
            send_json(res, 200, body);
        });

        server_.Get("/jobs/:id/preview", [this](const httplib::Request& req, httplib::Response& res) {
            auto r = lookup(req, res);
            if (!r) return;
            const auto s = r->job->snapshot();
            if (!s.preview) {
                res.set_header("Retry-After", "1");
                return send_error(res, 503, "no preview yet");
            }
            const Canvas& c = *s.preview;
            const int side = std::max(c.height(), c.width());
            std::string png;
            if (side > options_.preview_max_side) {
                const double f = static_cast<double>(options_.preview_max_side) / side;
                const int h = std::max(1, static_cast<int>(std::lround(c.height() * f)));
                const int w = std::max(1, static_cast<int>(std::lround(c.width() * f)));
                png = encode_png(resize(c, h, w));
            } else {
                png = encode_png(c);
            }
            res.set_header("Cache-Control", "no-store");
            res.set_content(png, "image/png");
        });

        server_.Get("/jobs/:id/events", [this](const httplib::Request& req, httplib::Response& res) {
            auto r = lookup(req, res);
            if (!r) return;
            std::size_t resume = 0;
            if (req.has_header("Last-Event-ID")) {
                try {
                    const long last = std::stol(req.get_header_value("Last-Event-ID"));
                    std::lock_guard lock(r->mutex);
                    while (resume < r->events.size() && r->events[resume].step <= last) ++resume;
                } catch (const std::exception&) {
                    // ignore malformed ids and replay from the start
                }
            }
            auto cursor = std::make_shared<std::size_t>(resume);
            const std::string preview_url = "/jobs/" + r->id + "/preview";
            res.set_header("Cache-Control", "no-cache");
            res.set_chunked_content_provider("text/event-stream", [r, cursor, preview_url](std::size_t, httplib::DataSink& sink) {
                std::unique_lock lock(r->mutex);
                r->changed.wait_for(lock, std::chrono::milliseconds(250),
                                    [&] { return *cursor < r->events.size() || r->finished; });
                std::string out;
                for (; *cursor < r->events.size(); ++*cursor) {
                    const auto& e = r->events[*cursor];
                    const json data{{"step", e.step}, {"stage", e.stage}, {"total_loss", e.total_loss}, {"preview", preview_url}};
                    out += "id: " + std::to_string(e.step) + "\nevent: progress\ndata: " + data.dump() + "\n\n";
                }
                const bool done = r->finished;
                lock.unlock();
                if (done) {
                    const json data{{"status", to_string(r->job->status())}};
                    out += "event: end\ndata: " + data.dump() + "\n\n";
                }
                if (!out.empty() && !sink.write(out.data(), out.size())) return false;
                if (done) {
                    sink.done();
                    return true;
                }
                return sink.is_writable();
            });
        });

        server_.Post("/jobs/:id/cancel", [this](const httplib::Request& req, httplib::Response& res) {
            auto r = lookup(req, res);
            if (!r) return;
            r->job->cancel();
            send_json(res, 202, json{{"id", r->id}, {"status", to_string(r->job->status())}});
        });

        server_.Get("/jobs/:id/strokes", [this](const httplib::Request& req, httplib::Response& res) {
            auto r = lookup(req, res);
            if (!r) return;
            const auto s = r->job->snapshot();
            if (!s.strokes) {
                res.set_header("Retry-After", "1");
                return send_error(res, 503, "strokes not initialized yet");
            }
            send_json(res, 200, strokes_to_json(*s.strokes));
        });
    }

    void submit(const httplib::Request& req, httplib::Response& res) {
        if (!req.is_multipart_form_data()) return send_error(res, 400, "expected multipart/form-data");
        if (!req.has_file("content")) return send_error(res, 400, "content: image required");
        FitConfig config;
        Canvas content;
        std::optional<Canvas> style;
        try {
            content = decode_image(req.get_file_value("content").content);
        } catch (const IoError& e) {
            return send_error(res, 400, std::string("content: ") + e.what());
        }
        if (req.has_file("style")) {
            try {
                style = decode_image(req.get_file_value("style").content);
            } catch (const IoError& e) {
                return send_error(res, 400, std::string("style: ") + e.what());
            }
        }
        const RunMode mode = style ? RunMode::Stylize : RunMode::Reconstruct;
        try {
            json doc = json::object();
            if (req.has_file("config")) doc = json::parse(req.get_file_value("config").content);
            const auto rc = parse_run_config(doc, mode);
            if (rc.content || rc.style || rc.paths)
                throw ConfigError("content/style/paths: file paths are not accepted by the service; upload images instead");
            config = rc.fit;
            if (!style && config.stroke_loss.style > 0.0) throw ConfigError("stroke_loss.style: requires a style image");
        } catch (const json::exception& e) {
            return send_error(res, 400, std::string("config: ") + e.what());
        } catch (const ConfigError& e) {
            return send_error(res, 400, std::string("config: ") + e.what());
        }
        std::shared_ptr<JobRecord> record;
        try {
            record = start(std::move(config), std::move(content), std::move(style));
        } catch (const ConfigError& e) {
            return send_error(res, 400, std::string("config: ") + e.what());
        }
        if (!record) return send_error(res, 429, "too many running jobs");
        send_json(res, 202, json{{"id", record->id}});
    }

    ServiceOptions options_;
    httplib::Server server_;
    mutable std::mutex mutex_;
    std::map<std::string, std::shared_ptr<JobRecord>> jobs_;
    std::mt19937_64 rng_;
};

} // namespace brushfit
