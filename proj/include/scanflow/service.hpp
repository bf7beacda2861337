#pragma once

// Local HTTP JSON service: synchronous prediction, asynchronous optimize and
// personalize jobs with polling.

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

// Eigen must come before httplib: <resolv.h> defines a _res macro.
#include "scanflow/layout.hpp"
#include "scanflow/model.hpp"
#include "scanflow/svg.hpp"
#include "scanflow/training.hpp"

#include <httplib.h>
#include <json.hpp>

namespace scanflow::service {

using nlohmann::json;

enum class JobState { Queued, Running, Done, Failed };
enum class JobKind { Optimize, Personalize };

inline const char* to_string(JobState s) {
    switch (s) {
    case JobState::Queued: return "queued";
    case JobState::Running: return "running";
    case JobState::Done: return "done";
    case JobState::Failed: return "failed";
    }
    return "?";
}

inline const char* to_string(JobKind k) { return k == JobKind::Optimize ? "optimize" : "personalize"; }

struct JobRecord {
    std::string id;
    JobKind kind = JobKind::Optimize;
    JobState state = JobState::Queued;
    double progress = 0.0;
    std::string result_path;  // set iff done
    std::string error;
    std::optional<std::string> viewer;
};

inline json job_json(const JobRecord& j) {
    json o{{"id", j.id}, {"kind", to_string(j.kind)}, {"state", to_string(j.state)}, {"progress", j.progress}};
    o["result_path"] = j.result_path.empty() ? json(nullptr) : json(j.result_path);
    if (!j.error.empty()) o["error"] = j.error;
    if (j.viewer) o["viewer"] = *j.viewer;
    return o;
}

// Error body: {code, message, field?}.
inline json error_json(const std::string& code, const std::string& message, const std::string& field = {}) {
    json e{{"code", code}, {"message", message}};
    if (!field.empty()) e["field"] = field;
    return e;
}

struct ServiceOptions {
    fs::path results_dir;   // where job results are written; empty: memory only
    PersonalizationConfig personalization;
};

class Service {
public:
    Service(PolicyModel model, std::optional<Dataset> data, ServiceOptions opt = {})
        : model_(std::move(model)), data_(std::move(data)), opt_(std::move(opt)) {
        if (!opt_.results_dir.empty()) fs::create_directories(opt_.results_dir);
        routes();
        workers_.emplace_back([this] { worker(JobKind::Optimize); });
        workers_.emplace_back([this] { worker(JobKind::Personalize); });
    }

    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    ~Service() { shutdown(); }

    httplib::Server& http() { return server_; }

    // Binds and serves on the calling thread until stop().
    bool listen(const std::string& host, int port) { return server_.listen(host, port); }

    int bind_any_port(const std::string& host) { return server_.bind_to_any_port(host); }
    bool listen_after_bind() { return server_.listen_after_bind(); }

    void stop() { server_.stop(); }

    // Stops accepting requests, lets running jobs finish, fails queued ones.
    void shutdown() {
        server_.stop();
        {
            std::lock_guard lk(jobs_mu_);
            if (stopping_) return;
            stopping_ = true;
        }
        cv_.notify_all();
        for (auto& w : workers_)
            if (w.joinable()) w.join();
        std::lock_guard lk(jobs_mu_);
        for (auto& [_, j] : jobs_)
            if (j.state == JobState::Queued) {
                j.state = JobState::Failed;
                j.error = "service shut down before the job started";
            }
    }

    std::optional<JobRecord> job(const std::string& id) const {
        std::lock_guard lk(jobs_mu_);
        auto it = jobs_.find(id);
        if (it == jobs_.end()) return std::nullopt;
        return it->second;
    }

private:
    struct Pending {
        std::string id;
        json request;
    };

    static void reply(httplib::Response& res, int status, const json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    static json parse_body(const httplib::Request& req) {
        try {
            return json::parse(req.body);
        } catch (const json::parse_error& e) {
            throw ValidationError(std::string("request body is not valid JSON: ") + e.what(), "body");
        }
    }

    template <class F>
    static void guarded(httplib::Response& res, F&& f) {
        try {
            f();
        } catch (const ValidationError& e) {
            reply(res, 400, error_json("invalid_request", e.what(), e.field()));
        } catch (const FormatError& e) {
            reply(res, 400, error_json("invalid_format", e.what()));
        } catch (const json::exception& e) {
            reply(res, 400, error_json("invalid_request", e.what()));
        } catch (const std::exception& e) {
            reply(res, 500, error_json("internal", e.what()));
        }
    }

    void routes() {
        server_.Get("/health", [](const httplib::Request&, httplib::Response& res) {
            reply(res, 200, {{"status", "ok"}});
        });
        server_.Get("/model", [this](const httplib::Request&, httplib::Response& res) {
            std::shared_lock lk(model_mu_);
            reply(res, 200, {{"config", model_.config()}, {"mode", to_string(model_.mode())}, {"viewers", model_.viewer_ids()}});
        });
        server_.Post("/predict", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { reply(res, 200, predict(parse_body(req))); });
        });
        server_.Post("/personalize", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { reply(res, 202, submit_personalize(parse_body(req))); });
        });
        server_.Post("/optimize", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { reply(res, 202, submit_optimize(parse_body(req))); });
        });
        server_.Get(R"(/jobs/([A-Za-z0-9_-]+))", [this](const httplib::Request& req, httplib::Response& res) {
            const auto j = job(req.matches[1]);
            if (!j) return reply(res, 404, error_json("not_found", "no job '" + std::string(req.matches[1]) + "'", "id"));
            json body = job_json(*j);
            if (j->state == JobState::Done) {
                std::lock_guard lk(jobs_mu_);
                body["result"] = results_.at(j->id);
            }
            reply(res, 200, body);
        });
        server_.Get(R"(/results/([A-Za-z0-9_-]+))", [this](const httplib::Request& req, httplib::Response& res) {
            std::lock_guard lk(jobs_mu_);
            auto it = results_.find(req.matches[1]);
            if (it == results_.end())
                return reply(res, 404, error_json("not_found", "no result for '" + std::string(req.matches[1]) + "'", "id"));
            reply(res, 200, it->second);
        });
        server_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (res.body.empty()) {
                const std::string code = res.status == 404 ? "not_found" : "http_error";
                res.set_content(error_json(code, "HTTP " + std::to_string(res.status)).dump(), "application/json");
            }
        });
        server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            std::string msg = "unknown error";
            try {
                if (ep) std::rethrow_exception(ep);
            } catch (const std::exception& e) {
                msg = e.what();
            } catch (...) {
            }
            reply(res, 500, error_json("internal", msg));
        });
    }

    std::optional<std::string> viewer_arg(const json& body) const {
        if (!body.contains("viewer") || body["viewer"].is_null()) return std::nullopt;
        if (!body["viewer"].is_string()) throw ValidationError("viewer must be a string", "viewer");
        return body["viewer"].get<std::string>();
    }

    // Stimulus from {layout}, {image_path} or {image: {width, height, pixels}}.
    StimulusImage stimulus_from(const json& body, std::optional<layout::LayoutSpec>& lay) const {
        if (body.contains("layout")) {
            lay = layout::parse_spec(body["layout"]);
            return layout::render_layout(*lay, body.value("stimulus", std::string("layout")));
        }
        if (body.contains("image_path")) {
            return read_ppm(body["image_path"].get<std::string>(), body.value("stimulus", std::string("image")));
        }
        if (body.contains("image")) {
            const auto& im = body["image"];
            StimulusImage img(body.value("stimulus", std::string("image")), im.at("width").get<int>(), im.at("height").get<int>());
            img.pixels = im.at("pixels").get<std::vector<std::uint8_t>>();
            validate_image(img);
            return img;
        }
        if (body.contains("stimulus") && data_) return data_->stimulus(body["stimulus"].get<std::string>());
        throw ValidationError("request needs one of layout, image_path, image, or a dataset stimulus", "layout");
    }

    json predict(const json& body) {
        if (!body.is_object()) throw ValidationError("request body must be an object", "body");
        std::optional<layout::LayoutSpec> lay;
        const auto img = stimulus_from(body, lay);
        const auto mode = parse_rollout_mode(body.value("mode", std::string("greedy")));
        const auto seed = body.value("seed", std::uint64_t{0});
        const auto viewer = viewer_arg(body);
        std::shared_lock lk(model_mu_);
        const auto r = model_.rollout(img, viewer, mode, seed);
        json out{{"scanpath", record_json(r.path)}, {"log_prob", r.log_prob}};
        if (body.value("render", false)) out["svg"] = svg::render(r.path, img.width, img.height, lay ? &*lay : nullptr);
        return out;
    }

    std::string new_job(JobKind kind, json request, std::optional<std::string> viewer) {
        std::lock_guard lk(jobs_mu_);
        if (stopping_) throw Error("service is shutting down");
        const std::string id = std::string(to_string(kind)) + "-" + std::to_string(++next_id_);
        JobRecord j;
        j.id = id;
        j.kind = kind;
        j.viewer = std::move(viewer);
        jobs_.emplace(id, j);
        queues_[kind].push_back({id, std::move(request)});
        cv_.notify_all();
        return id;
    }

    json submit_personalize(const json& body) {
        if (!body.is_object()) throw ValidationError("request body must be an object", "body");
        const auto viewer = viewer_arg(body);
        if (!viewer || viewer->empty()) throw ValidationError("personalize needs a viewer id", "viewer");
        if (!body.contains("scanpaths") || !body["scanpaths"].is_array() || body["scanpaths"].empty())
            throw ValidationError("personalize needs at least one scanpath", "scanpaths");
        if (!data_) throw ValidationError("service was started without a data root; stimuli cannot be resolved", "scanpaths");
        {
            std::shared_lock lk(model_mu_);
            if (model_.mode() != Mode::Individual)
                throw ValidationError("loaded checkpoint is population-level", "mode");
            if (model_.has_viewer(*viewer)) throw ValidationError("viewer '" + *viewer + "' already has an embedding", "viewer");
        }
        {
            std::lock_guard lk(jobs_mu_);
            for (const auto& [_, j] : jobs_)
                if (j.kind == JobKind::Personalize && j.viewer == viewer &&
                    (j.state == JobState::Queued || j.state == JobState::Running))
                    throw ValidationError("a personalization job for '" + *viewer + "' is already pending", "viewer");
        }
        // Validate records now so malformed input fails the request, not the job.
        for (const auto& r : body["scanpaths"]) {
            const auto raw = parse_record(r);
            normalize_scanpath(raw, data_->stimulus(raw.stimulus_id));
        }
        const auto id = new_job(JobKind::Personalize, body, viewer);
        return {{"job_id", id}, {"state", "queued"}};
    }

    json submit_optimize(const json& body) {
        if (!body.is_object()) throw ValidationError("request body must be an object", "body");
        if (!body.contains("layout_spec")) throw ValidationError("optimize needs a layout_spec", "layout_spec");
        const auto spec = layout::parse_spec(body["layout_spec"]);
        const auto order = body.contains("order") ? body["order"].get<std::vector<std::string>>() : spec.order;
        layout::validate_order(spec, order);
        const std::string scope = body.value("scope", std::string("population"));
        if (scope != "population") {
            std::shared_lock lk(model_mu_);
            if (!model_.has_viewer(scope)) throw ValidationError("no embedding for viewer '" + scope + "'", "scope");
        }
        const auto n = layout::count_layouts(spec, spec.cap);
        if (n > spec.cap) throw ValidationError("candidate count exceeds cap " + std::to_string(spec.cap), "cap");
        const auto id = new_job(JobKind::Optimize, body, std::nullopt);
        return {{"job_id", id}, {"state", "queued"}};
    }

    void set_progress(const std::string& id, double p) {
        std::lock_guard lk(jobs_mu_);
        jobs_[id].progress = p;
    }

    json run_optimize(const std::string& id, const json& body) {
        const auto spec = layout::parse_spec(body["layout_spec"]);
        const auto order = body.contains("order") ? body["order"].get<std::vector<std::string>>() : spec.order;
        const std::string scope = body.value("scope", std::string("population"));
        layout::ModelPredictorOptions po;
        po.mode = parse_rollout_mode(body.value("mode", std::string("greedy")));
        po.samples = body.value("samples", 8);
        po.seed = body.value("seed", std::uint64_t{0});
        layout::OptimizeOptions oo;
        if (scope != "population") oo.viewer = scope;
        oo.on_progress = [&](double p) { set_progress(id, p); };
        std::shared_lock lk(model_mu_);
        layout::ModelPredictor pred(model_, po);
        const auto r = layout::optimize(spec, order, pred, oo);
        json out = layout::result_json(r);
        out["scope"] = scope;
        if (!r.per_viewer.empty())
            out["svg"] = svg::render(r.per_viewer.front().path, spec.canvas_w, spec.canvas_h, &r.layout);
        return out;
    }

    json run_personalize(const std::string& id, const json& body) {
        const auto viewer = body["viewer"].get<std::string>();
        std::vector<Scanpath> samples;
        for (const auto& r : body["scanpaths"]) {
            const auto raw = parse_record(r);
            samples.push_back(normalize_scanpath(raw, data_->stimulus(raw.stimulus_id)));
        }
        auto pcfg = opt_.personalization;
        pcfg.steps = body.value("steps", pcfg.steps);
        pcfg.n_path = body.value("n_path", pcfg.n_path);
        pcfg.seed = body.value("seed", pcfg.seed);
        PolicyModel work = [&] {
            std::shared_lock lk(model_mu_);
            return model_;
        }();
        set_progress(id, 0.1);
        const auto r = personalize(work, viewer, samples, *data_, pcfg);
        {
            std::unique_lock lk(model_mu_);
            model_.add_viewer(viewer, work.viewer(viewer).value);
        }
        return {{"viewer", viewer},
                {"samples_used", r.samples_used},
                {"initial_loss", r.initial_loss},
                {"final_loss", r.final_loss}};
    }

    void worker(JobKind kind) {
        for (;;) {
            Pending p;
            {
                std::unique_lock lk(jobs_mu_);
                cv_.wait(lk, [&] { return stopping_ || !queues_[kind].empty(); });
                if (stopping_) return;
                p = std::move(queues_[kind].front());
                queues_[kind].pop_front();
                jobs_[p.id].state = JobState::Running;
            }
            json result;
            std::string error;
            try {
                result = kind == JobKind::Optimize ? run_optimize(p.id, p.request) : run_personalize(p.id, p.request);
            } catch (const std::exception& e) {
                error = e.what();
            }
            std::string path;
            if (error.empty()) {
                path = "memory:" + p.id;
                if (!opt_.results_dir.empty()) {
                    const auto file = opt_.results_dir / (p.id + ".json");
                    std::ofstream(file, std::ios::binary) << result.dump(2) << '\n';
                    path = file.string();
                }
            }
            std::lock_guard lk(jobs_mu_);
            auto& j = jobs_[p.id];
            if (error.empty()) {
                results_[p.id] = std::move(result);
                j.result_path = path;
                j.progress = 1.0;
                j.state = JobState::Done;
            } else {
                j.error = error;
                j.state = JobState::Failed;
            }
        }
    }

    PolicyModel model_;
    mutable std::shared_mutex model_mu_;
    std::optional<Dataset> data_;
    ServiceOptions opt_;
    httplib::Server server_;

    mutable std::mutex jobs_mu_;
    std::condition_variable cv_;
    std::map<std::string, JobRecord> jobs_;
    std::map<std::string, json> results_;
    std::map<JobKind, std::deque<Pending>> queues_;
    long next_id_ = 0;
    bool stopping_ = false;
    std::vector<std::thread> workers_;
};

} // namespace scanflow::service
