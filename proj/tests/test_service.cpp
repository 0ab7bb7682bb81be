#include <gtest/gtest.h>

#include <filesystem>
#include <thread>

#include "brushfit/brushfit.hpp"
#include "brushfit/service.hpp"
#include "support/scenes.hpp"

using namespace brushfit;
using namespace std::chrono_literals;
namespace fs = std::filesystem;

namespace {

const std::string kData = BRUSHFIT_TEST_DATA;

class ServiceTest : public ::testing::Test {
protected:
    void start(ServiceOptions opts = {}) {
        service_ = std::make_unique<Service>(opts);
        port_ = service_->bind_any();
        ASSERT_GT(port_, 0);
        thread_ = std::thread([this] { service_->listen_after_bind(); });
        client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
        client_->set_read_timeout(30, 0);
        for (int i = 0; i < 200 && !service_->server().is_running(); ++i) std::this_thread::sleep_for(5ms);
    }

    void TearDown() override {
        if (service_) service_->shutdown();
        if (thread_.joinable()) thread_.join();
    }

    httplib::Result submit(const Canvas& content, const std::string& config, const Canvas* style = nullptr) {
        httplib::MultipartFormDataItems items{{"content", encode_png(content), "content.png", "image/png"}};
        if (style) items.push_back({"style", encode_png(*style), "style.png", "image/png"});
        if (!config.empty()) items.push_back({"config", config, "config.json", "application/json"});
        return client_->Post("/jobs", items);
    }

    std::string submit_ok(const Canvas& content, const std::string& config) {
        auto res = submit(content, config);
        EXPECT_TRUE(res);
        if (!res) return "";
        EXPECT_EQ(res->status, 202) << res->body;
        return json::parse(res->body).value("id", "");
    }

    json status(const std::string& id) {
        auto res = client_->Get("/jobs/" + id + "/status");
        EXPECT_TRUE(res && res->status == 200);
        return res ? json::parse(res->body) : json{};
    }

    json wait_finished(const std::string& id) {
        for (int i = 0; i < 6000; ++i) {
            auto s = status(id);
            const auto st = s.value("status", "");
            if (st == "done" || st == "cancelled" || st == "failed") {
                // the record is marked finished after persistence
                const auto r = service_->find(id);
                for (int k = 0; k < 200; ++k) {
                    {
                        std::lock_guard lock(r->mutex);
                        if (r->finished) break;
                    }
                    std::this_thread::sleep_for(5ms);
                }
                return s;
            }
            std::this_thread::sleep_for(10ms);
        }
        ADD_FAILURE() << "job " << id << " did not finish";
        return {};
    }

    json post_paths(const std::string& id, const json& body, int expect) {
        auto res = client_->Post("/jobs/" + id + "/paths", body.dump(), "application/json");
        EXPECT_TRUE(res);
        if (!res) return {};
        EXPECT_EQ(res->status, expect) << res->body;
        return json::parse(res->body);
    }

    std::unique_ptr<Service> service_;
    std::unique_ptr<httplib::Client> client_;
    std::thread thread_;
    int port_ = 0;
};

Canvas photo(int side = 32) { return resize(load_image(kData + "/astronaut_128.png"), side, side); }

const char* kQuick = R"({"canvas_size": 0, "num_strokes": 20, "stroke_steps": 30, "preview_every": 5, "seed": 4})";
const char* kLong = R"({"canvas_size": 0, "num_strokes": 20, "stroke_steps": 1000000, "preview_every": 5})";

json straight_path(int n) {
    json line = json::array();
    for (int i = 0; i < n; ++i) line.push_back({2.0 + 2 * i, 3.0 + i});
    return json::array({line});
}

} // namespace

TEST_F(ServiceTest, ReconstructionJobRunsToCompletion) {
    start();
    const auto id = submit_ok(photo(), kQuick);
    ASSERT_FALSE(id.empty());
    const auto s = wait_finished(id);
    EXPECT_EQ(s["id"], id);
    EXPECT_EQ(s["status"], "done");
    EXPECT_EQ(s["stage"], "strokes");
    EXPECT_EQ(s["step"], 30);
    EXPECT_EQ(s["total_steps"], 30);
    EXPECT_TRUE(s["eta_seconds"].is_null());
    EXPECT_TRUE(s["losses"]["total"].is_number());
    EXPECT_TRUE(s["losses"]["mse"].is_number());
    EXPECT_FALSE(s.contains("error"));

    auto strokes = client_->Get("/jobs/" + id + "/strokes");
    ASSERT_TRUE(strokes);
    ASSERT_EQ(strokes->status, 200);
    const auto set = strokes_from_json(json::parse(strokes->body));
    EXPECT_EQ(set.size(), 20u);

    auto preview = client_->Get("/jobs/" + id + "/preview");
    ASSERT_TRUE(preview);
    ASSERT_EQ(preview->status, 200);
    EXPECT_EQ(preview->get_header_value("Content-Type"), "image/png");
    const auto img = decode_png(preview->body);
    EXPECT_EQ(img.height(), 32);
    EXPECT_LE(max_abs_diff(img, render(set, RenderParams{})), 0.5 / 255 + 1e-12);
}

TEST_F(ServiceTest, StylizeJobCountsBothStages) {
    start();
    const auto style = resize(load_image(kData + "/coffee_128.png"), 24, 24);
    auto res = submit(photo(16),
                      R"({"canvas_size": 0, "num_strokes": 10, "stroke_steps": 3, "pixel_steps": 2, "pixel_target_side": 20})",
                      &style);
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 202) << res->body;
    const auto s = wait_finished(json::parse(res->body)["id"]);
    EXPECT_EQ(s["status"], "done");
    EXPECT_EQ(s["stage"], "pixels");
    EXPECT_EQ(s["step"], 5);
    EXPECT_TRUE(s["losses"]["style"].is_number());
}

TEST_F(ServiceTest, RejectsBadSubmissions) {
    start();
    auto bad_json = submit(photo(), "{\"num_strokes\": ");
    ASSERT_TRUE(bad_json);
    EXPECT_EQ(bad_json->status, 400);
    auto unknown = submit(photo(), R"({"render": {"neighbours": 3}})");
    ASSERT_TRUE(unknown);
    EXPECT_EQ(unknown->status, 400);
    EXPECT_NE(json::parse(unknown->body)["error"].get<std::string>().find("render.neighbours"), std::string::npos);
    auto wrong_type = submit(photo(), R"({"stroke_steps": "many"})");
    ASSERT_TRUE(wrong_type);
    EXPECT_EQ(wrong_type->status, 400);
    EXPECT_NE(wrong_type->body.find("stroke_steps"), std::string::npos);
    auto file_path = submit(photo(), R"({"content": "/etc/passwd"})");
    ASSERT_TRUE(file_path);
    EXPECT_EQ(file_path->status, 400);
    auto style_loss = submit(photo(), R"({"stroke_loss": {"style": 1}})");
    ASSERT_TRUE(style_loss);
    EXPECT_EQ(style_loss->status, 400);

    httplib::MultipartFormDataItems garbage{{"content", "not an image", "c.png", "image/png"}};
    auto bad_image = client_->Post("/jobs", garbage);
    ASSERT_TRUE(bad_image);
    EXPECT_EQ(bad_image->status, 400);
    auto no_content = client_->Post("/jobs", httplib::MultipartFormDataItems{{"config", "{}", "", ""}});
    ASSERT_TRUE(no_content);
    EXPECT_EQ(no_content->status, 400);
    auto not_multipart = client_->Post("/jobs", "{}", "application/json");
    ASSERT_TRUE(not_multipart);
    EXPECT_EQ(not_multipart->status, 400);
}

TEST_F(ServiceTest, ThirdConcurrentJobIsRejected) {
    start();
    const auto a = submit_ok(photo(), kLong), b = submit_ok(photo(), kLong);
    ASSERT_NE(a, b);
    auto third = submit(photo(), kLong);
    ASSERT_TRUE(third);
    EXPECT_EQ(third->status, 429);
    // capacity frees up once a job finishes
    ASSERT_EQ(client_->Post("/jobs/" + a + "/cancel")->status, 202);
    EXPECT_EQ(wait_finished(a)["status"], "cancelled");
    const auto c = submit_ok(photo(), kLong);
    EXPECT_FALSE(c.empty());
}

TEST_F(ServiceTest, PathsEchoTangents) {
    start();
    const auto id = submit_ok(photo(), kLong);
    const auto body = post_paths(id, {{"paths", straight_path(10)}, {"L", 4}}, 200);
    ASSERT_EQ(body["tangents"].size(), 1u);
    const auto& line = body["tangents"][0];
    ASSERT_EQ(line.size(), 7u);
    const double n = std::hypot(2.0, 1.0);
    for (const auto& e : line) {
        EXPECT_NEAR(e["tangent"][0].get<double>(), 2.0 / n, 1e-12);
        EXPECT_NEAR(e["tangent"][1].get<double>(), 1.0 / n, 1e-12);
    }
    EXPECT_EQ(body["L"], 4);
    EXPECT_EQ(body["weight"], 1.0);
    EXPECT_TRUE(service_->find(id)->job->received_paths());

    const auto err = post_paths(id, {{"paths", straight_path(3)}}, 400);
    EXPECT_NE(err["error"].get<std::string>().find("paths[0]"), std::string::npos);
    post_paths(id, {{"paths", straight_path(10)}, {"L", 0}}, 400);
    post_paths(id, {{"paths", straight_path(10)}, {"colour", 1}}, 400);
    post_paths(id, json::object(), 400);
    auto raw = client_->Post("/jobs/" + id + "/paths", "[[", "application/json");
    ASSERT_TRUE(raw);
    EXPECT_EQ(raw->status, 400);
    post_paths("feedbeef", {{"paths", straight_path(10)}}, 404);
}

TEST_F(ServiceTest, PathsAfterFinishConflict) {
    start();
    const auto id = submit_ok(photo(16), kQuick);
    wait_finished(id);
    post_paths(id, {{"paths", straight_path(10)}}, 409);
}

TEST_F(ServiceTest, UnknownJobIs404) {
    start();
    for (const char* route : {"/status", "/preview", "/events", "/strokes"}) {
        auto res = client_->Get(std::string("/jobs/0123456789abcdef") + route);
        ASSERT_TRUE(res);
        EXPECT_EQ(res->status, 404) << route;
    }
    auto res = client_->Post("/jobs/0123456789abcdef/cancel");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 404);
}

TEST_F(ServiceTest, PreviewBeforeFirstCadenceShowsInitialization) {
    start();
    const auto content = decode_png(encode_png(photo()));  // as the service sees the upload
    const auto id = submit_ok(content, R"({"canvas_size": 0, "num_strokes": 20, "stroke_steps": 1000000, "preview_every": 100000, "seed": 2})");
    for (int i = 0; i < 1000 && status(id)["step"].get<long>() < 1; ++i) std::this_thread::sleep_for(5ms);
    auto res = client_->Get("/jobs/" + id + "/preview");
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 200);
    const auto init = initialize_strokes(content, 20, 2);
    EXPECT_EQ(decode_png(res->body), decode_png(encode_png(render(init, RenderParams{}))));
    const auto s = status(id);
    EXPECT_EQ(s["status"], "running");
    EXPECT_TRUE(s["eta_seconds"].is_number());
    client_->Post("/jobs/" + id + "/cancel");
}

TEST_F(ServiceTest, LargePreviewIsDownscaled) {
    start();
    const auto wide = resize(photo(), 20, 700);
    const auto id = submit_ok(wide, R"({"canvas_size": 0, "num_strokes": 5, "stroke_steps": 1})");
    wait_finished(id);
    auto res = client_->Get("/jobs/" + id + "/preview");
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 200);
    const auto img = decode_png(res->body);
    EXPECT_EQ(img.width(), 512);
    EXPECT_EQ(img.height(), 15);
}

TEST_F(ServiceTest, EventStreamIsMonotone) {
    start();
    const auto id = submit_ok(photo(), kQuick);
    std::string stream;
    auto res = client_->Get("/jobs/" + id + "/events", [&](const char* data, std::size_t n) {
        stream.append(data, n);
        return true;
    });
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    EXPECT_EQ(res->get_header_value("Content-Type"), "text/event-stream");
    std::vector<long> ids;
    std::istringstream in(stream);
    std::string line;
    bool ended = false;
    while (std::getline(in, line)) {
        if (line.rfind("id: ", 0) == 0) ids.push_back(std::stol(line.substr(4)));
        if (line == "event: end") ended = true;
        if (line.rfind("data: ", 0) == 0) {
            const auto d = json::parse(line.substr(6));
            if (d.contains("step")) {
                EXPECT_TRUE(d["total_loss"].is_number());
                EXPECT_EQ(d["preview"], "/jobs/" + id + "/preview");
            } else {
                EXPECT_EQ(d["status"], "done");
            }
        }
    }
    EXPECT_TRUE(ended);
    EXPECT_EQ(ids, (std::vector<long>{5, 10, 15, 20, 25, 30}));

    httplib::Headers resume{{"Last-Event-ID", "15"}};
    std::string rest;
    client_->Get("/jobs/" + id + "/events", resume, [&](const char* data, std::size_t n) {
        rest.append(data, n);
        return true;
    });
    EXPECT_EQ(rest.find("id: 15\n"), std::string::npos);
    EXPECT_NE(rest.find("id: 20\n"), std::string::npos);
}

TEST_F(ServiceTest, CancelStopsJob) {
    start();
    const auto id = submit_ok(photo(), kLong);
    auto res = client_->Post("/jobs/" + id + "/cancel");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 202);
    const auto s = wait_finished(id);
    EXPECT_EQ(s["status"], "cancelled");
    EXPECT_LT(s["step"].get<long>(), 1000000);
}

TEST_F(ServiceTest, PathInjectionChangesLaterHistory) {
    start();
    const char* cfg = R"({"canvas_size": 0, "num_strokes": 30, "stroke_steps": 150, "preview_every": 5, "seed": 9})";
    const auto control = submit_ok(photo(), cfg);
    const auto steered = submit_ok(photo(), cfg);
    for (int i = 0; i < 2000 && status(steered)["step"].get<long>() < 3; ++i) std::this_thread::sleep_for(1ms);
    post_paths(steered, {{"paths", straight_path(12)}, {"L", 5}, {"weight", 1.0}}, 200);
    wait_finished(control);
    wait_finished(steered);
    const auto a = service_->find(control)->job->history(), b = service_->find(steered)->job->history();
    ASSERT_EQ(a.size(), 150u);
    ASSERT_EQ(b.size(), 150u);
    std::size_t k = 0;
    while (k < a.size() && a[k] == b[k]) ++k;
    EXPECT_GE(k, 3u);
    EXPECT_LT(k, a.size());
    for (std::size_t i = k; i < a.size(); ++i) EXPECT_NE(a[i], b[i]) << i;
}

TEST_F(ServiceTest, HistoryMatchesCli) {
    start();
    const auto dir = fs::temp_directory_path() / "brushfit_service_cli";
    fs::create_directories(dir);
    const auto content = photo();
    save_image(content, (dir / "c.png").string());
    write_file((dir / "cfg.json").string(), kQuick);
    const std::string cmd = std::string(BRUSHFIT_CLI) + " fit -q --content " + (dir / "c.png").string() + " --config " +
                            (dir / "cfg.json").string() + " --out " + (dir / "s.json").string() + " --history " +
                            (dir / "h.json").string();
    ASSERT_EQ(std::system(cmd.c_str()), 0);
    const auto id = submit_ok(content, kQuick);
    wait_finished(id);
    const auto cli = json::parse(read_file((dir / "h.json").string())).get<std::vector<double>>();
    EXPECT_EQ(service_->find(id)->job->history(), cli);
    auto strokes = client_->Get("/jobs/" + id + "/strokes");
    ASSERT_TRUE(strokes);
    EXPECT_EQ(json::parse(strokes->body), json::parse(read_file((dir / "s.json").string())));
    fs::remove_all(dir);
}

TEST_F(ServiceTest, PersistsFinishedArtifacts) {
    const auto dir = fs::temp_directory_path() / "brushfit_service_persist";
    fs::remove_all(dir);
    ServiceOptions opts;
    opts.persist_dir = dir.string();
    start(opts);
    const auto id = submit_ok(photo(16), kQuick);
    wait_finished(id);
    EXPECT_EQ(load_strokes((dir / id / "strokes.json").string()).size(), 20u);
    EXPECT_EQ(load_image((dir / id / "final.png").string()).height(), 16);
    fs::remove_all(dir);
}
