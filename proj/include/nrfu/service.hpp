#pragma once

// HTTP/JSON facade: datasets, fits and simulations as asynchronous jobs,
// synchronous scenario editing and imputation previews.

#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

// Eigen first: <resolv.h>, pulled in by httplib, defines a `_res` macro that
// collides with Eigen parameter names.
#include "nrfu/io.hpp"

#include <httplib.h>

namespace nrfu {

enum class JobKind { Fit, Simulate };
enum class JobStatus { Queued, Running, Done, Failed };

inline std::string_view to_string(JobStatus s) {
  switch (s) {
    case JobStatus::Queued: return "Queued";
    case JobStatus::Running: return "Running";
    case JobStatus::Done: return "Done";
    case JobStatus::Failed: return "Failed";
  }
  return "Failed";
}

/// Status and progress are written only by the worker that owns the job;
/// readers poll them without blocking the computation.
class Job {
 public:
  Job(std::string id, JobKind kind) : id_(std::move(id)), kind_(kind) {}

  [[nodiscard]] const std::string& id() const { return id_; }
  [[nodiscard]] JobKind kind() const { return kind_; }
  [[nodiscard]] JobStatus status() const { return status_.load(); }
  [[nodiscard]] double progress() const { return progress_.load(); }
  [[nodiscard]] bool finished() const {
    const auto s = status();
    return s == JobStatus::Done || s == JobStatus::Failed;
  }

  void start() { status_ = JobStatus::Running; }
  /// Progress never moves backwards.
  void report_progress(double fraction) {
    double cur = progress_.load();
    while (fraction > cur && !progress_.compare_exchange_weak(cur, fraction)) {
    }
  }
  void succeed() {
    progress_ = 1.0;
    status_ = JobStatus::Done;
  }
  void fail(json error) {
    {
      std::lock_guard lock(mutex_);
      error_ = std::move(error);
    }
    status_ = JobStatus::Failed;
  }
  [[nodiscard]] json error() const {
    std::lock_guard lock(mutex_);
    return error_;
  }

  [[nodiscard]] json status_json() const {
    json j = {{"id", id_},
              {"kind", kind_ == JobKind::Fit ? "fit" : "simulate"},
              {"status", std::string(to_string(status()))},
              {"progress", progress()}};
    if (status() == JobStatus::Failed) j["error"] = error();
    return j;
  }

 private:
  std::string id_;
  JobKind kind_;
  std::atomic<JobStatus> status_{JobStatus::Queued};
  std::atomic<double> progress_{0.0};
  mutable std::mutex mutex_;
  json error_;
};

/// Fixed-size pool draining a FIFO queue.
class WorkerPool {
 public:
  explicit WorkerPool(std::size_t workers) {
    workers = std::max<std::size_t>(workers, 1);
    for (std::size_t i = 0; i < workers; ++i) threads_.emplace_back([this] { loop(); });
  }
  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;
  ~WorkerPool() {
    {
      std::lock_guard lock(mutex_);
      stopping_ = true;
    }
    cv_.notify_all();
  }

  void submit(std::function<void()> task) {
    {
      std::lock_guard lock(mutex_);
      queue_.push_back(std::move(task));
    }
    cv_.notify_one();
  }

 private:
  void loop() {
    while (true) {
      std::function<void()> task;
      {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
        if (stopping_ && queue_.empty()) return;
        task = std::move(queue_.front());
        queue_.pop_front();
      }
      task();
    }
  }

  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> queue_;
  bool stopping_ = false;
  std::vector<std::jthread> threads_;  // last member: joined before the rest is destroyed
};

struct ServiceOptions {
  std::size_t workers = 1;
  std::size_t max_preview = 5000;
  std::size_t scenario_warning_threshold = 15;
};

class Service {
 public:
  explicit Service(ServiceOptions options = {}) : options_(options), pool_(options.workers) {}

  void register_routes(httplib::Server& server) {
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, PUT, DELETE, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });
    server.Post("/datasets", wrap([this](const auto& req, auto& res) { post_dataset(req, res); }));
    server.Get("/datasets/:id", wrap([this](const auto& req, auto& res) { get_dataset(req, res); }));
    server.Delete("/datasets/:id", wrap([this](const auto& req, auto& res) { delete_dataset(req, res); }));
    server.Post("/fits", wrap([this](const auto& req, auto& res) { post_fit(req, res); }));
    server.Get("/fits/:id", wrap([this](const auto& req, auto& res) { get_fit(req, res); }));
    server.Delete("/fits/:id", wrap([this](const auto& req, auto& res) { delete_fit(req, res); }));
    server.Get("/fits/:id/scenarios", wrap([this](const auto& req, auto& res) { list_scenarios(req, res); }));
    server.Put("/fits/:id/scenarios/:label", wrap([this](const auto& req, auto& res) { put_scenario(req, res); }));
    server.Get("/fits/:id/scenarios/:label", wrap([this](const auto& req, auto& res) { get_scenario(req, res); }));
    server.Delete("/fits/:id/scenarios/:label",
                  wrap([this](const auto& req, auto& res) { delete_scenario(req, res); }));
    server.Post("/fits/:id/scenarios/:label/impute", wrap([this](const auto& req, auto& res) { impute(req, res); }));
    server.Post("/simulations", wrap([this](const auto& req, auto& res) { post_simulation(req, res); }));
    server.Get("/simulations/:id", wrap([this](const auto& req, auto& res) { get_simulation(req, res); }));
    server.Delete("/simulations/:id", wrap([this](const auto& req, auto& res) { delete_simulation(req, res); }));
    server.Get("/jobs/:id", wrap([this](const auto& req, auto& res) { get_job(req, res); }));
  }

 private:
  struct HttpError {
    int status;
    std::string code;
    std::string message;
    json detail;
  };

  struct DatasetRecord {
    DataMatrix raw;
  };

  struct StoredScenario {
    ScenarioConfig config;
    Scenario resolved;
  };

  struct FitRecord {
    std::shared_ptr<Job> job;
    std::string dataset_id;
    std::shared_ptr<const FitOutput> output;  ///< set once the job is Done
    std::string summary;                      ///< canonical body
    std::mutex scenario_mutex;
    std::map<std::string, StoredScenario> scenarios;
  };

  struct SimulationRecord {
    std::shared_ptr<Job> job;
    std::string fit_id;
    std::string report;  ///< canonical body once Done
  };

  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  static void send(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(canonical_dump(body), "application/json");
  }

  static json error_body(const std::string& code, const std::string& message, const json& detail = nullptr) {
    return {{"code", code}, {"message", message}, {"detail", detail}};
  }

  static int http_status(ErrorCode code) {
    switch (code) {
      case ErrorCode::ParseError:
      case ErrorCode::InconsistentColumns:
      case ErrorCode::ValidationError:
        return 400;
      default:
        return 422;
    }
  }

  static Handler wrap(Handler h) {
    return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
      try {
        h(req, res);
      } catch (const HttpError& e) {
        send(res, e.status, error_body(e.code, e.message, e.detail));
      } catch (const Error& e) {
        send(res, http_status(e.code()), error_body(std::string(to_string(e.code())), e.what()));
      } catch (const json::exception& e) {
        send(res, 400, error_body("ParseError", e.what()));
      } catch (const std::exception& e) {
        send(res, 500, error_body("Internal", e.what()));
      }
    };
  }

  static HttpError not_found(const std::string& what, const std::string& id) {
    return {404, "NotFound", what + " " + id + " does not exist", {{"id", id}}};
  }

  static json body_json(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    json j = parse_json(req.body);
    if (!j.is_object()) throw Error(ErrorCode::ValidationError, "request body must be a JSON object");
    return j;
  }

  std::string next_id(const char* prefix) { return std::string(prefix) + "-" + std::to_string(++counter_); }

  template <class Map>
  static auto lookup(const Map& m, const std::string& id, const char* what) {
    auto it = m.find(id);
    if (it == m.end()) throw not_found(what, id);
    return it->second;
  }

  static HttpError not_finished(const Job& job) {
    const bool failed = job.status() == JobStatus::Failed;
    return {409, failed ? "JobFailed" : "JobNotFinished",
            failed ? "job " + job.id() + " failed" : "job " + job.id() + " has not finished", job.status_json()};
  }

  // -- datasets -------------------------------------------------------------

  void post_dataset(const httplib::Request& req, httplib::Response& res) {
    CsvOptions opts;
    if (req.has_param("respond_column")) opts.respond_column = req.get_param_value("respond_column");
    auto record = std::make_shared<DatasetRecord>();
    record->raw = parse_csv(req.body, opts);
    std::string id;
    {
      std::unique_lock lock(mutex_);
      id = next_id("ds");
      datasets_[id] = record;
    }
    send(res, 201, dataset_json(id, record->raw));
  }

  static json dataset_json(const std::string& id, const DataMatrix& d) {
    return {{"dataset_id", id}, {"n", d.n()}, {"n_t", d.n_t()}, {"p", d.p()}, {"variables", d.names}};
  }

  void get_dataset(const httplib::Request& req, httplib::Response& res) {
    const auto id = req.path_params.at("id");
    std::shared_lock lock(mutex_);
    send(res, 200, dataset_json(id, lookup(datasets_, id, "dataset")->raw));
  }

  void delete_dataset(const httplib::Request& req, httplib::Response& res) {
    const auto id = req.path_params.at("id");
    std::unique_lock lock(mutex_);
    if (datasets_.erase(id) == 0) throw not_found("dataset", id);
    res.status = 204;
  }

  // -- fits -----------------------------------------------------------------

  void post_fit(const httplib::Request& req, httplib::Response& res) {
    const json body = body_json(req);
    detail::check_keys(body, "fit request", {"dataset_id", "transform", "model", "chain", "seed"});
    const auto dataset_id = body.at("dataset_id").get<std::string>();
    // Reuse the config parser so the service and the CLI agree on defaults.
    json cfg = json::object();
    for (const char* key : {"transform", "model", "chain", "seed"})
      if (body.contains(key)) cfg[key] = body[key];
    const RunConfig config = run_config_from_json(cfg);

    std::shared_ptr<DatasetRecord> dataset;
    {
      std::shared_lock lock(mutex_);
      dataset = lookup(datasets_, dataset_id, "dataset");
    }
    (void)config.model.resolved(dataset->raw.p());  // reject bad hyperparameters before queuing
    auto record = std::make_shared<FitRecord>();
    std::string id;
    {
      std::unique_lock lock(mutex_);
      id = next_id("fit");
      record->job = std::make_shared<Job>(id, JobKind::Fit);
      record->dataset_id = dataset_id;
      fits_[id] = record;
      jobs_[id] = record->job;
    }
    pool_.submit([record, dataset, config] {
      auto& job = *record->job;
      job.start();
      try {
        auto out = std::make_shared<FitOutput>(run_fit(
            dataset->raw, config.transform, config.model, config.chain, config.seed,
            [&job](std::size_t done, std::size_t total) { job.report_progress(static_cast<double>(done) / total); }));
        json summary = fit_summary_json(*out, config.chain);
        summary["fit_id"] = job.id();
        summary["dataset_id"] = record->dataset_id;
        summary["status"] = "Done";
        {
          std::lock_guard lock(record->scenario_mutex);
          const auto mar = build_mar_scenario(out->chain.map);
          record->scenarios["MAR"] = {ScenarioConfig{"MAR", {}, std::nullopt}, mar};
        }
        record->summary = canonical_dump(summary);
        record->output = std::move(out);
        job.succeed();
      } catch (const Error& e) {
        job.fail(error_body(std::string(to_string(e.code())), e.what()));
      } catch (const std::exception& e) {
        job.fail(error_body("Internal", e.what()));
      }
    });
    send(res, 202, {{"fit_id", id}, {"status", "Queued"}});
  }

  std::shared_ptr<FitRecord> find_fit(const std::string& id) {
    std::shared_lock lock(mutex_);
    return lookup(fits_, id, "fit");
  }

  std::shared_ptr<FitRecord> finished_fit(const std::string& id) {
    auto fit = find_fit(id);
    if (fit->job->status() != JobStatus::Done) throw not_finished(*fit->job);
    return fit;
  }

  void get_fit(const httplib::Request& req, httplib::Response& res) {
    auto fit = find_fit(req.path_params.at("id"));
    const auto status = fit->job->status();
    if (status == JobStatus::Done) {
      res.status = 200;
      res.set_content(fit->summary, "application/json");
    } else if (status == JobStatus::Failed) {
      send(res, 200, fit->job->status_json());
    } else {
      const auto err = not_finished(*fit->job);
      json body = error_body(err.code, err.message, err.detail);
      body["status"] = err.detail["status"];
      body["progress"] = err.detail["progress"];
      send(res, 409, body);
    }
  }

  void delete_fit(const httplib::Request& req, httplib::Response& res) {
    const auto id = req.path_params.at("id");
    std::unique_lock lock(mutex_);
    auto fit = lookup(fits_, id, "fit");
    if (!fit->job->finished()) throw not_finished(*fit->job);
    fits_.erase(id);
    jobs_.erase(id);
    res.status = 204;
  }

  json scenario_json(const StoredScenario& s) const {
    const auto adjusted = s.resolved.adjusted_count();
    json j = scenario_to_json(s.config);
    j["pi_star"] = detail::to_json(s.resolved.pi_star);
    j["adjusted"] = adjusted;
    j["warning"] = adjusted > options_.scenario_warning_threshold
                       ? json("more than " + std::to_string(options_.scenario_warning_threshold) +
                              " components adjusted")
                       : json(nullptr);
    return j;
  }

  void list_scenarios(const httplib::Request& req, httplib::Response& res) {
    auto fit = finished_fit(req.path_params.at("id"));
    json out = json::array();
    std::lock_guard lock(fit->scenario_mutex);
    for (const auto& [label, s] : fit->scenarios) out.push_back(scenario_json(s));
    send(res, 200, {{"scenarios", out}});
  }

  void put_scenario(const httplib::Request& req, httplib::Response& res) {
    auto fit = finished_fit(req.path_params.at("id"));
    json body = body_json(req);
    body["label"] = req.path_params.at("label");
    if (!body.contains("tilts")) body["tilts"] = json::array();
    const ScenarioConfig config = scenario_from_json(body);
    StoredScenario stored{config, make_scenario(config.label, resolve_tilts(config.tilts, fit->output->chain.map),
                                                fit->output->chain.map, config.probability)};
    const json out = scenario_json(stored);
    {
      std::lock_guard lock(fit->scenario_mutex);
      fit->scenarios[config.label] = std::move(stored);
    }
    send(res, 200, out);
  }

  StoredScenario find_scenario(FitRecord& fit, const std::string& label) {
    std::lock_guard lock(fit.scenario_mutex);
    return lookup(fit.scenarios, label, "scenario");
  }

  void get_scenario(const httplib::Request& req, httplib::Response& res) {
    auto fit = finished_fit(req.path_params.at("id"));
    send(res, 200, scenario_json(find_scenario(*fit, req.path_params.at("label"))));
  }

  void delete_scenario(const httplib::Request& req, httplib::Response& res) {
    auto fit = finished_fit(req.path_params.at("id"));
    const auto label = req.path_params.at("label");
    std::lock_guard lock(fit->scenario_mutex);
    if (fit->scenarios.erase(label) == 0) throw not_found("scenario", label);
    res.status = 204;
  }

  void impute(const httplib::Request& req, httplib::Response& res) {
    auto fit = finished_fit(req.path_params.at("id"));
    const auto scenario = find_scenario(*fit, req.path_params.at("label"));
    const json body = body_json(req);
    detail::check_keys(body, "impute request", {"count", "seed"});
    const auto& data = fit->output->data;
    long long count = body.value("count", static_cast<long long>(data.n() - data.n_t()));
    if (count < 0) throw Error(ErrorCode::ValidationError, "count must be non-negative");
    count = std::min<long long>(count, static_cast<long long>(options_.max_preview));
    const auto seed = body.value("seed", fit->output->seed);
    Rng rng = SeedContext(seed).child(kPreviewStream).make_rng();
    const auto rows = impute_unit_nonrespondents(rng, fit->output->chain.map, scenario.resolved, count);
    json out = imputation_preview_json(rows, data.names, data.transform);
    out["label"] = scenario.config.label;
    out["count"] = count;
    out["seed"] = seed;
    send(res, 200, out);
  }

  // -- simulations ----------------------------------------------------------

  void post_simulation(const httplib::Request& req, httplib::Response& res) {
    const json body = body_json(req);
    detail::check_keys(body, "simulation request", {"fit_id", "plan", "scenarios", "cost", "seed"});
    const auto fit_id = body.at("fit_id").get<std::string>();
    auto fit = finished_fit(fit_id);

    json cfg = json::object();
    for (const char* key : {"plan", "cost", "seed"})
      if (body.contains(key)) cfg[key] = body[key];
    std::vector<ScenarioConfig> scenarios;
    if (body.contains("scenarios")) {
      cfg["scenarios"] = body["scenarios"];
    } else {
      std::lock_guard lock(fit->scenario_mutex);
      for (const auto& [label, s] : fit->scenarios) scenarios.push_back(s.config);
    }
    RunConfig config = run_config_from_json(cfg);
    if (body.contains("scenarios")) scenarios = config.scenarios;
    const std::uint64_t seed = body.contains("seed") ? config.seed : fit->output->seed;
    // Validate the full plan up front so bad requests fail with 422, not as a job.
    RunConfig probe = config;
    probe.scenarios = scenarios;
    const auto& data = fit->output->data;
    build_plan(probe, fit->output->chain.map, seed).validate(data.n() - data.n_t());

    auto record = std::make_shared<SimulationRecord>();
    std::string id;
    {
      std::unique_lock lock(mutex_);
      id = next_id("sim");
      record->job = std::make_shared<Job>(id, JobKind::Simulate);
      record->fit_id = fit_id;
      simulations_[id] = record;
      jobs_[id] = record->job;
    }
    auto output = fit->output;
    pool_.submit([record, output, scenarios, config, seed] {
      auto& job = *record->job;
      job.start();
      try {
        const auto report = simulate_from_fit(*output, scenarios, config.plan, config.cost, seed,
                                               [&job](const ProgressEvent& e) {
                                                 if (e.kind == ProgressEvent::Kind::Finished)
                                                   job.report_progress(static_cast<double>(e.done) / e.total);
                                               });
        record->report = canonical_dump(report_to_json(report));
        job.succeed();
      } catch (const Error& e) {
        job.fail(error_body(std::string(to_string(e.code())), e.what()));
      } catch (const std::exception& e) {
        job.fail(error_body("Internal", e.what()));
      }
    });
    send(res, 202, {{"simulation_id", id}, {"status", "Queued"}});
  }

  void get_simulation(const httplib::Request& req, httplib::Response& res) {
    std::shared_ptr<SimulationRecord> sim;
    {
      std::shared_lock lock(mutex_);
      sim = lookup(simulations_, req.path_params.at("id"), "simulation");
    }
    const auto status = sim->job->status();
    if (status == JobStatus::Done) {
      res.status = 200;
      res.set_content(sim->report, "application/json");
    } else if (status == JobStatus::Failed) {
      send(res, 200, sim->job->status_json());
    } else {
      const auto err = not_finished(*sim->job);
      json body = error_body(err.code, err.message, err.detail);
      body["status"] = err.detail["status"];
      body["progress"] = err.detail["progress"];
      send(res, 409, body);
    }
  }

  void delete_simulation(const httplib::Request& req, httplib::Response& res) {
    const auto id = req.path_params.at("id");
    std::unique_lock lock(mutex_);
    auto sim = lookup(simulations_, id, "simulation");
    if (!sim->job->finished()) throw not_finished(*sim->job);
    simulations_.erase(id);
    jobs_.erase(id);
    res.status = 204;
  }

  void get_job(const httplib::Request& req, httplib::Response& res) {
    std::shared_lock lock(mutex_);
    send(res, 200, lookup(jobs_, req.path_params.at("id"), "job")->status_json());
  }

  ServiceOptions options_;
  std::shared_mutex mutex_;  // guards the registries below
  std::uint64_t counter_ = 0;
  std::map<std::string, std::shared_ptr<DatasetRecord>> datasets_;
  std::map<std::string, std::shared_ptr<FitRecord>> fits_;
  std::map<std::string, std::shared_ptr<SimulationRecord>> simulations_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  WorkerPool pool_;  // destroyed first: running jobs finish before the registries go
};

/// Blocks serving on host:port until the server is stopped.
inline bool serve(const std::string& host, int port, const ServiceOptions& options) {
  Service service(options);
  httplib::Server server;
  service.register_routes(server);
  return server.listen(host, port);
}

}  // namespace nrfu
