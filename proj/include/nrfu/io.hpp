#pragma once

// Run configuration, fit summaries, reports and imputed censuses as JSON/CSV.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nrfu/data.hpp"
#include "nrfu/gibbs.hpp"
#include "nrfu/pattern_mixture.hpp"
#include "nrfu/simulation.hpp"

namespace nrfu {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// JSON primitives

namespace detail {

inline json number(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

inline double number_from(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline json to_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(number(v(i)));
  return out;
}

inline json to_json(const Matrix& m) {
  json out = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.push_back(to_json(Vector(m.row(i).transpose())));
  return out;
}

inline Vector vector_from(const json& j) {
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = number_from(j[i]);
  return v;
}

inline Matrix matrix_from(const json& j) {
  if (j.empty()) return {};
  Matrix m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j[0].size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (j[i].size() != j[0].size()) throw Error(ErrorCode::ParseError, "ragged matrix");
    m.row(static_cast<Eigen::Index>(i)) = vector_from(j[i]).transpose();
  }
  return m;
}

inline json bools(const std::vector<bool>& b) {
  json out = json::array();
  for (bool x : b) out.push_back(x);
  return out;
}

/// Rejects keys outside `allowed` so typos in configs surface early.
inline void check_keys(const json& j, std::string_view section, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, std::string(section) + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw Error(ErrorCode::InvalidConfig, "unknown key '" + key + "' in " + std::string(section));
    }
  }
}

template <class T>
void read_if(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end() && !it->is_null()) out = it->get<T>();
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

}  // namespace detail

/// Sorted keys, shortest round-trip numbers, two-space indent, trailing newline.
inline std::string canonical_dump(const json& j) { return j.dump(2) + "\n"; }

inline json parse_json(std::string_view text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::ParseError, e.what());
  }
}

// ---------------------------------------------------------------------------
// Run configuration

struct DataConfig {
  std::string path;
  std::string respond_column = "respond";
};

struct ScenarioConfig {
  std::string label;
  std::vector<TiltSpec> tilts;
  std::optional<double> probability;
};

struct PlanConfig {
  std::vector<double> delta_grid{0.0, 0.25, 0.5, 0.75, 1.0};
  std::size_t M = 10;
  std::size_t R = 5;
  std::optional<Eigen::Index> n_max;
  RefitMode refit_mode = RefitMode::Auto;
  std::size_t min_rows_per_dim = 10;
  ChainConfig refit_chain{1500, 500, 2, SaturationAction::Warn};
  std::size_t threads = 1;
};

struct RunConfig {
  DataConfig data;
  TransformOptions transform;
  HyperParams model;
  ChainConfig chain;
  std::vector<ScenarioConfig> scenarios;
  PlanConfig plan;
  CostParams cost;
  std::uint64_t seed = 1;
  std::filesystem::path base_dir;  ///< relative data paths resolve here

  [[nodiscard]] std::filesystem::path data_path() const {
    std::filesystem::path p(data.path);
    return p.is_absolute() ? p : base_dir / p;
  }
};

namespace detail {

inline ChainConfig chain_from_json(const json& j, ChainConfig c, std::string_view section) {
  check_keys(j, section, {"iterations", "burn_in", "thin", "on_saturation", "init"});
  read_if(j, "iterations", c.iterations);
  read_if(j, "burn_in", c.burn_in);
  read_if(j, "thin", c.thin);
  if (auto it = j.find("on_saturation"); it != j.end()) {
    const auto s = it->get<std::string>();
    if (s == "warn") c.saturation_action = SaturationAction::Warn;
    else if (s == "abort") c.saturation_action = SaturationAction::Abort;
    else throw Error(ErrorCode::InvalidConfig, "on_saturation must be warn or abort");
  }
  if (auto it = j.find("init"); it != j.end()) {
    const auto s = it->get<std::string>();
    if (s == "uniform") c.init_mode = InitMode::Uniform;
    else if (s == "single") c.init_mode = InitMode::Single;
    else throw Error(ErrorCode::InvalidConfig, "init must be uniform or single");
  }
  c.validate();
  return c;
}

inline json chain_to_json(const ChainConfig& c) {
  return {{"iterations", c.iterations},
          {"burn_in", c.burn_in},
          {"thin", c.thin},
          {"on_saturation", c.saturation_action == SaturationAction::Abort ? "abort" : "warn"},
          {"init", c.init_mode == InitMode::Single ? "single" : "uniform"}};
}

inline TiltSpec tilt_from_json(const json& j) {
  check_keys(j, "tilt", {"component", "rank", "rank_from_top", "multiplier", "set"});
  TiltSpec t;
  int targets = 0;
  auto target = [&](const char* key, TiltSpec::Target kind) {
    if (auto it = j.find(key); it != j.end()) {
      const auto idx = it->get<long long>();
      if (idx < 1) throw Error(ErrorCode::InvalidConfig, std::string(key) + " is 1-based");
      t.target = kind;
      t.index = static_cast<std::size_t>(idx);
      ++targets;
    }
  };
  target("component", TiltSpec::Target::Component);
  target("rank", TiltSpec::Target::RankFromBottom);
  target("rank_from_top", TiltSpec::Target::RankFromTop);
  if (targets != 1) throw Error(ErrorCode::InvalidConfig, "a tilt names exactly one of component, rank, rank_from_top");
  const bool has_mult = j.contains("multiplier");
  const bool has_set = j.contains("set");
  if (has_mult == has_set) throw Error(ErrorCode::InvalidConfig, "a tilt carries exactly one of multiplier, set");
  t.tilt = has_mult ? Tilt::multiplier(j["multiplier"].get<double>()) : Tilt::override_weight(j["set"].get<double>());
  if (!(t.tilt.value >= 0.0) || !std::isfinite(t.tilt.value)) {
    throw Error(ErrorCode::InvalidConfig, "tilt values must be finite and non-negative");
  }
  return t;
}

inline json tilt_to_json(const TiltSpec& t) {
  json j;
  switch (t.target) {
    case TiltSpec::Target::Component: j["component"] = t.index; break;
    case TiltSpec::Target::RankFromBottom: j["rank"] = t.index; break;
    case TiltSpec::Target::RankFromTop: j["rank_from_top"] = t.index; break;
  }
  j[t.tilt.kind == Tilt::Kind::Multiplier ? "multiplier" : "set"] = t.tilt.value;
  return j;
}

}  // namespace detail

inline HyperParams hyperparams_from_json(const json& j, HyperParams hp = {}) {
  detail::check_keys(j, "model",
                     {"K", "a_alpha", "b_alpha", "a_phi", "b_phi", "h", "f", "mu0", "covariance", "spherical_variance"});
  detail::read_if(j, "K", hp.K);
  detail::read_if(j, "a_alpha", hp.a_alpha);
  detail::read_if(j, "b_alpha", hp.b_alpha);
  detail::read_if(j, "a_phi", hp.a_phi);
  detail::read_if(j, "b_phi", hp.b_phi);
  detail::read_if(j, "h", hp.h);
  detail::read_if(j, "f", hp.f);
  detail::read_if(j, "spherical_variance", hp.spherical_variance);
  if (auto it = j.find("mu0"); it != j.end() && !it->is_null()) hp.mu0 = detail::vector_from(*it);
  if (auto it = j.find("covariance"); it != j.end()) {
    const auto s = it->get<std::string>();
    if (s == "full") hp.mode = CovarianceMode::Full;
    else if (s == "spherical") hp.mode = CovarianceMode::Spherical;
    else throw Error(ErrorCode::InvalidConfig, "covariance must be full or spherical");
  }
  return hp;
}

inline json hyperparams_to_json(const HyperParams& hp) {
  json j = {{"K", hp.K},           {"a_alpha", hp.a_alpha}, {"b_alpha", hp.b_alpha},
            {"a_phi", hp.a_phi},   {"b_phi", hp.b_phi},     {"h", hp.h},
            {"f", hp.f},           {"covariance", hp.spherical() ? "spherical" : "full"},
            {"spherical_variance", hp.spherical_variance}};
  if (hp.mu0.size() > 0) j["mu0"] = detail::to_json(hp.mu0);
  return j;
}

inline ChainConfig chain_config_from_json(const json& j, ChainConfig base = {}) {
  return detail::chain_from_json(j, base, "chain");
}

inline ScenarioConfig scenario_from_json(const json& j) {
  detail::check_keys(j, "scenario", {"label", "tilts", "p"});
  ScenarioConfig s;
  s.label = j.at("label").get<std::string>();
  if (s.label.empty()) throw Error(ErrorCode::InvalidConfig, "scenario label is empty");
  if (auto it = j.find("tilts"); it != j.end())
    for (const auto& t : *it) s.tilts.push_back(detail::tilt_from_json(t));
  if (auto it = j.find("p"); it != j.end() && !it->is_null()) s.probability = it->get<double>();
  return s;
}

inline json scenario_to_json(const ScenarioConfig& s) {
  json j = {{"label", s.label}, {"tilts", json::array()}};
  for (const auto& t : s.tilts) j["tilts"].push_back(detail::tilt_to_json(t));
  if (s.probability) j["p"] = *s.probability;
  return j;
}

inline PlanConfig plan_from_json(const json& j, PlanConfig plan = {}) {
  detail::check_keys(j, "plan",
                     {"delta_grid", "M", "R", "n_max", "refit_mode", "min_rows_per_dim", "refit_chain", "threads"});
  detail::read_if(j, "delta_grid", plan.delta_grid);
  detail::read_if(j, "M", plan.M);
  detail::read_if(j, "R", plan.R);
  if (auto it = j.find("n_max"); it != j.end() && !it->is_null()) plan.n_max = it->get<Eigen::Index>();
  if (auto it = j.find("refit_mode"); it != j.end()) plan.refit_mode = parse_refit_mode(it->get<std::string>());
  detail::read_if(j, "min_rows_per_dim", plan.min_rows_per_dim);
  if (auto it = j.find("refit_chain"); it != j.end())
    plan.refit_chain = detail::chain_from_json(*it, plan.refit_chain, "refit_chain");
  detail::read_if(j, "threads", plan.threads);
  return plan;
}

inline CostParams cost_from_json(const json& j) {
  detail::check_keys(j, "cost", {"fixed", "per_unit", "table"});
  CostParams c;
  detail::read_if(j, "fixed", c.fixed);
  detail::read_if(j, "per_unit", c.per_unit);
  if (auto it = j.find("table"); it != j.end() && !it->is_null()) {
    std::map<Eigen::Index, double> table;
    for (const auto& [key, value] : it->items()) {
      Eigen::Index id = 0;
      auto [ptr, ec] = std::from_chars(key.data(), key.data() + key.size(), id);
      if (ec != std::errc() || ptr != key.data() + key.size()) {
        throw Error(ErrorCode::InvalidConfig, "cost table keys are row ids, got '" + key + "'");
      }
      table[id] = value.get<double>();
    }
    c.table = std::move(table);
  }
  c.validate();
  return c;
}

inline RunConfig run_config_from_json(const json& j, std::filesystem::path base_dir = {}) {
  try {
    detail::check_keys(j, "config", {"data", "transform", "model", "chain", "scenarios", "plan", "cost", "seed"});
    RunConfig c;
    c.base_dir = std::move(base_dir);
    if (auto it = j.find("data"); it != j.end()) {
      detail::check_keys(*it, "data", {"path", "respond_column"});
      detail::read_if(*it, "path", c.data.path);
      detail::read_if(*it, "respond_column", c.data.respond_column);
    }
    if (auto it = j.find("transform"); it != j.end()) {
      detail::check_keys(*it, "transform", {"log_all", "log_variables", "zero_shift"});
      detail::read_if(*it, "log_all", c.transform.log_all);
      detail::read_if(*it, "log_variables", c.transform.log_variables);
      detail::read_if(*it, "zero_shift", c.transform.zero_shift);
    }
    if (auto it = j.find("model"); it != j.end()) c.model = hyperparams_from_json(*it);
    if (auto it = j.find("chain"); it != j.end()) c.chain = chain_config_from_json(*it);
    if (auto it = j.find("scenarios"); it != j.end()) {
      std::set<std::string> labels;
      for (const auto& s : *it) {
        c.scenarios.push_back(scenario_from_json(s));
        if (!labels.insert(c.scenarios.back().label).second) {
          throw Error(ErrorCode::InvalidConfig, "duplicate scenario label " + c.scenarios.back().label);
        }
      }
    }
    if (auto it = j.find("plan"); it != j.end()) c.plan = plan_from_json(*it);
    if (auto it = j.find("cost"); it != j.end()) c.cost = cost_from_json(*it);
    detail::read_if(j, "seed", c.seed);
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  return run_config_from_json(parse_json(detail::read_text(path)), path.parent_path());
}

// ---------------------------------------------------------------------------
// Fit pipeline shared by the CLI and the service

/// Stream tags for the top-level pipeline.
inline constexpr std::uint64_t kFitStream = 0;
inline constexpr std::uint64_t kPrecompleteStream = 5;
inline constexpr std::uint64_t kScatterStream = 6;
inline constexpr std::uint64_t kPreviewStream = 7;

struct FitOutput {
  DataMatrix data;  ///< preprocessed
  ChainResult chain;
  std::uint64_t seed = 0;
};

inline FitOutput run_fit(const DataMatrix& raw, const TransformOptions& transform, const HyperParams& hp,
                         const ChainConfig& chain, std::uint64_t seed, const ProgressFn& progress = {}) {
  FitOutput out;
  out.data = preprocess(raw, transform);
  if (out.data.n_t() < 1) throw Error(ErrorCode::DegenerateData, "no respondents");
  out.seed = seed;
  Rng rng = SeedContext(seed).child(kFitStream).make_rng();
  out.chain = run_chain(rng, out.data.respondent_values(), out.data.respondent_missing(), hp, chain, progress);
  return out;
}

inline std::vector<Scenario> resolve_scenarios(const std::vector<ScenarioConfig>& configs, const MapEstimate& map) {
  std::vector<Scenario> out;
  if (configs.empty()) {
    out.push_back(build_mar_scenario(map));
    return out;
  }
  for (const auto& c : configs) out.push_back(make_scenario(c.label, resolve_tilts(c.tilts, map), map, c.probability));
  return out;
}

inline SimulationPlan build_plan(const RunConfig& config, const MapEstimate& map, std::uint64_t seed) {
  SimulationPlan plan;
  plan.scenarios = resolve_scenarios(config.scenarios, map);
  plan.delta_grid = config.plan.delta_grid;
  plan.M = config.plan.M;
  plan.R = config.plan.R;
  plan.n_max = config.plan.n_max;
  plan.refit_mode = config.plan.refit_mode;
  plan.min_rows_per_dim = config.plan.min_rows_per_dim;
  plan.refit_chain = config.plan.refit_chain;
  plan.threads = config.plan.threads;
  plan.cost = config.cost;
  plan.master_seed = seed;
  return plan;
}

inline SimulationInput simulation_input(const DataMatrix& data, const MapEstimate& map, const HyperParams& hp,
                                        std::uint64_t seed) {
  return prepare_simulation(data, map, hp, SeedContext(seed).child(kPrecompleteStream));
}

/// The simulation stage of a run: scenarios resolved against the fitted MAP,
/// respondent item gaps completed once, then the plan executed.
inline UtilityReport simulate_from_fit(const FitOutput& fit, const std::vector<ScenarioConfig>& scenarios,
                                       const PlanConfig& plan_config, const CostParams& cost, std::uint64_t seed,
                                       const PlanProgressFn& progress = {}, const CensusSink& sink = {}) {
  RunConfig config;
  config.scenarios = scenarios;
  config.plan = plan_config;
  config.cost = cost;
  const SimulationPlan plan = build_plan(config, fit.chain.map, seed);
  const SimulationInput input = simulation_input(fit.data, fit.chain.map, fit.chain.hp, seed);
  return run_plan(plan, input, progress, sink);
}

// ---------------------------------------------------------------------------
// Fit summary

inline json transform_to_json(const std::vector<TransformMeta>& meta) {
  json out = json::array();
  for (const auto& m : meta) {
    out.push_back({{"log", m.log_applied}, {"zero_shift", m.zero_shift}, {"center", m.center}, {"scale", m.scale}});
  }
  return out;
}

inline std::vector<TransformMeta> transform_from_json(const json& j) {
  std::vector<TransformMeta> out;
  for (const auto& m : j) {
    out.push_back({m.at("log").get<bool>(), m.at("zero_shift").get<double>(), m.at("center").get<double>(),
                   m.at("scale").get<double>()});
  }
  return out;
}

/// Exact serialization of a MAP estimate (numbers round-trip).
inline json map_to_json(const MapEstimate& map) {
  json sigma = json::array();
  for (const auto& s : map.sigma) sigma.push_back(detail::to_json(s.matrix()));
  json rank = json::array();
  std::vector<std::size_t> r(map.K());
  for (std::size_t pos = 0; pos < map.rank_order.size(); ++pos) r[map.rank_order[pos]] = pos + 1;
  for (auto x : r) rank.push_back(x);
  return {{"pi", detail::to_json(map.pi)},
          {"occupied", detail::bools(map.occupied)},
          {"mu", detail::to_json(map.mu)},
          {"sigma", sigma},
          {"delta", detail::to_json(map.delta)},
          {"rank", rank},
          {"y_min", detail::to_json(map.y_min)},
          {"iteration", map.iteration},
          {"log_posterior", detail::number(map.log_posterior)}};
}

inline MapEstimate map_from_json(const json& j) {
  try {
    MapEstimate map;
    map.pi = detail::vector_from(j.at("pi"));
    for (const auto& b : j.at("occupied")) map.occupied.push_back(b.get<bool>());
    map.mu = detail::matrix_from(j.at("mu"));
    for (const auto& s : j.at("sigma")) map.sigma.emplace_back(detail::matrix_from(s));
    map.delta = detail::vector_from(j.at("delta"));
    map.y_min = detail::vector_from(j.at("y_min"));
    const auto rank = j.at("rank").get<std::vector<std::size_t>>();
    map.rank_order.assign(rank.size(), 0);
    for (std::size_t k = 0; k < rank.size(); ++k) {
      if (rank[k] < 1 || rank[k] > rank.size()) throw Error(ErrorCode::ParseError, "rank out of range");
      map.rank_order[rank[k] - 1] = k;
    }
    map.iteration = j.at("iteration").get<std::size_t>();
    map.log_posterior = detail::number_from(j.at("log_posterior"));
    const auto K = map.K();
    if (map.occupied.size() != K || static_cast<std::size_t>(map.mu.rows()) != K || map.sigma.size() != K ||
        static_cast<std::size_t>(map.delta.size()) != K) {
      throw Error(ErrorCode::DimensionMismatch, "MAP arrays disagree on K");
    }
    return map;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, e.what());
  }
}

/// Deterministic respondent subsample on the model scale plus 95% ellipses
/// for every variable pair and occupied component.
inline json scatter_sample_json(const DataMatrix& data, const MapEstimate& map, std::uint64_t seed,
                                std::size_t max_points = 500) {
  const auto ids = data.respondents();
  std::vector<Eigen::Index> pick = ids;
  if (pick.size() > max_points) {
    Rng rng = SeedContext(seed).child(kScatterStream).make_rng();
    std::shuffle(pick.begin(), pick.end(), rng);
    pick.resize(max_points);
    std::sort(pick.begin(), pick.end());
  }
  json points = json::array();
  for (Eigen::Index i : pick) {
    json row = json::array();
    for (Eigen::Index v = 0; v < data.p(); ++v) row.push_back(detail::number(data.values(i, v)));
    points.push_back(row);
  }
  const Vector pi = zero_empty_components(map.pi, map.occupied);
  json ellipses = json::array();
  for (Eigen::Index a = 0; a < data.p(); ++a) {
    for (Eigen::Index b = a + 1; b < data.p(); ++b) {
      for (std::size_t k = 0; k < map.K(); ++k) {
        if (!map.occupied[k]) continue;
        const auto e = ellipse_95(map.mu.row(static_cast<Eigen::Index>(k)).transpose(), map.sigma[k], a, b);
        ellipses.push_back({{"i", a},
                            {"j", b},
                            {"component", k + 1},
                            {"pi", pi(static_cast<Eigen::Index>(k))},
                            {"center", {e.center_x, e.center_y}},
                            {"major", e.major},
                            {"minor", e.minor},
                            {"rotation", e.rotation}});
      }
    }
  }
  return {{"variables", data.names}, {"row_ids", pick}, {"points", points}, {"ellipses", ellipses}};
}

inline json fit_summary_json(const FitOutput& fit, const ChainConfig& chain) {
  const auto& diag = fit.chain.diagnostics;
  std::size_t max_occupied = 0;
  for (auto o : diag.occupied_trace) max_occupied = std::max(max_occupied, o);
  json j;
  j["n"] = fit.data.n();
  j["n_t"] = fit.data.n_t();
  j["p"] = fit.data.p();
  j["variables"] = fit.data.names;
  j["seed"] = fit.seed;
  j["model"] = hyperparams_to_json(fit.chain.hp);
  j["chain"] = detail::chain_to_json(chain);
  j["transform"] = transform_to_json(fit.data.transform);
  j["map"] = map_to_json(fit.chain.map);
  j["pi_mar"] = detail::to_json(zero_empty_components(fit.chain.map.pi, fit.chain.map.occupied));
  j["diagnostics"] = {{"saturated", diag.saturated},
                      {"first_saturation_sweep", diag.saturated ? json(diag.first_saturation_sweep) : json(nullptr)},
                      {"max_occupied", max_occupied},
                      {"occupied_trace", diag.occupied_trace},
                      {"alpha_trace", diag.alpha_trace}};
  j["scatter"] = scatter_sample_json(fit.data, fit.chain.map, fit.seed);
  return j;
}

// ---------------------------------------------------------------------------
// Report

namespace detail {

inline json summary_to_json(const MeasureSummary& m) {
  return {{"aggregate", number(m.aggregate)}, {"per_variable", to_json(m.per_variable)}, {"skipped", bools(m.skipped)}};
}

inline MeasureSummary summary_from_json(const json& j) {
  MeasureSummary m;
  m.aggregate = number_from(j.at("aggregate"));
  m.per_variable = vector_from(j.at("per_variable"));
  for (const auto& b : j.at("skipped")) m.skipped.push_back(b.get<bool>());
  return m;
}

}  // namespace detail

inline json report_to_json(const UtilityReport& r) {
  json j;
  j["variables"] = r.variables;
  j["scenarios"] = json::array();
  for (std::size_t s = 0; s < r.scenario_labels.size(); ++s) {
    j["scenarios"].push_back({{"label", r.scenario_labels[s]},
                              {"p", r.subjective_probs[s] ? json(*r.subjective_probs[s]) : json(nullptr)}});
  }
  j["delta_grid"] = r.delta_grid;
  j["refit_mode"] = std::string(to_string(r.refit_mode));
  j["seed"] = r.master_seed;
  j["M"] = r.M;
  j["R"] = r.R;
  j["n"] = r.n;
  j["n_t"] = r.n_t;
  j["n0"] = r.n0;
  j["n_max"] = r.n_max;
  j["cells"] = json::array();
  for (const auto& c : r.cells) {
    json reps = json::array();
    for (const auto& rep : c.replicates) {
      reps.push_back({{"j", rep.key.j},
                      {"l", rep.key.l},
                      {"theta", detail::to_json(rep.theta)},
                      {"tau", detail::to_json(rep.tau)},
                      {"rho", detail::number(rep.rho)},
                      {"cost", detail::number(rep.cost)},
                      {"converged", rep.propensity_converged}});
    }
    j["cells"].push_back({{"scenario", c.scenario},
                          {"delta_index", c.delta_index},
                          {"delta", c.delta},
                          {"n_f", c.n_f},
                          {"theta", detail::summary_to_json(c.theta)},
                          {"tau", detail::summary_to_json(c.tau)},
                          {"rho", detail::number(c.rho)},
                          {"cost", detail::number(c.cost)},
                          {"replicates", reps}});
  }
  j["expected"] = json::array();
  for (const auto& e : r.expected) {
    j["expected"].push_back({{"delta", e.delta},
                             {"theta", detail::number(e.theta)},
                             {"tau", detail::number(e.tau)},
                             {"rho", detail::number(e.rho)},
                             {"cost", detail::number(e.cost)}});
  }
  j["failures"] = json::array();
  for (const auto& f : r.failures) {
    j["failures"].push_back(
        {{"scenario", f.key.s}, {"j", f.key.j}, {"delta_index", f.key.delta_index}, {"message", f.message}});
  }
  return j;
}

inline UtilityReport report_from_json(const json& j) {
  try {
    UtilityReport r;
    r.variables = j.at("variables").get<std::vector<std::string>>();
    for (const auto& s : j.at("scenarios")) {
      r.scenario_labels.push_back(s.at("label").get<std::string>());
      r.subjective_probs.push_back(s.at("p").is_null() ? std::nullopt : std::optional<double>(s.at("p").get<double>()));
    }
    r.delta_grid = j.at("delta_grid").get<std::vector<double>>();
    r.refit_mode = parse_refit_mode(j.at("refit_mode").get<std::string>());
    r.master_seed = j.at("seed").get<std::uint64_t>();
    r.M = j.at("M").get<std::size_t>();
    r.R = j.at("R").get<std::size_t>();
    r.n = j.at("n").get<Eigen::Index>();
    r.n_t = j.at("n_t").get<Eigen::Index>();
    r.n0 = j.at("n0").get<Eigen::Index>();
    r.n_max = j.at("n_max").get<Eigen::Index>();
    for (const auto& c : j.at("cells")) {
      CellResult cell;
      cell.scenario = c.at("scenario").get<std::size_t>();
      cell.delta_index = c.at("delta_index").get<std::size_t>();
      cell.delta = c.at("delta").get<double>();
      cell.n_f = c.at("n_f").get<Eigen::Index>();
      cell.theta = detail::summary_from_json(c.at("theta"));
      cell.tau = detail::summary_from_json(c.at("tau"));
      cell.rho = detail::number_from(c.at("rho"));
      cell.cost = detail::number_from(c.at("cost"));
      for (const auto& rep : c.at("replicates")) {
        ReplicateResult x;
        x.key = {cell.scenario, rep.at("j").get<std::size_t>(), cell.delta_index, rep.at("l").get<std::size_t>()};
        x.theta = detail::vector_from(rep.at("theta"));
        x.tau = detail::vector_from(rep.at("tau"));
        x.rho = detail::number_from(rep.at("rho"));
        x.cost = detail::number_from(rep.at("cost"));
        x.propensity_converged = rep.at("converged").get<bool>();
        cell.replicates.push_back(std::move(x));
      }
      r.cells.push_back(std::move(cell));
    }
    for (const auto& e : j.at("expected")) {
      r.expected.push_back({e.at("delta").get<double>(), detail::number_from(e.at("theta")),
                            detail::number_from(e.at("tau")), detail::number_from(e.at("rho")),
                            detail::number_from(e.at("cost"))});
    }
    for (const auto& f : j.at("failures")) {
      r.failures.push_back({{f.at("scenario").get<std::size_t>(), f.at("j").get<std::size_t>(),
                             f.at("delta_index").get<std::size_t>(), 0},
                            f.at("message").get<std::string>()});
    }
    if (r.cells.size() != r.scenario_labels.size() * r.delta_grid.size()) {
      throw Error(ErrorCode::ParseError, "report has the wrong number of cells");
    }
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, e.what());
  }
}

/// One row per (scenario, delta, variable), an "all" row per (scenario,
/// delta) carrying the aggregates, rho and cost, and "expected" rows when
/// scenario probabilities were given.
inline std::string report_to_csv(const UtilityReport& r) {
  auto num = [](double x) { return std::isfinite(x) ? format_double(x) : std::string(); };
  std::string out = "scenario,delta,n_f,variable,theta,tau,rho,cost\n";
  for (const auto& c : r.cells) {
    const std::string prefix =
        r.scenario_labels[c.scenario] + "," + format_double(c.delta) + "," + std::to_string(c.n_f) + ",";
    for (std::size_t v = 0; v < r.variables.size(); ++v) {
      const auto vi = static_cast<Eigen::Index>(v);
      const double th = c.theta.per_variable.size() > vi ? c.theta.per_variable(vi) : NAN;
      const double ta = c.tau.per_variable.size() > vi ? c.tau.per_variable(vi) : NAN;
      out += prefix + r.variables[v] + "," + num(th) + "," + num(ta) + ",,\n";
    }
    out += prefix + "all," + num(c.theta.aggregate) + "," + num(c.tau.aggregate) + "," + num(c.rho) + "," +
           num(c.cost) + "\n";
  }
  for (const auto& e : r.expected) {
    out += "expected," + format_double(e.delta) + ",,all," + num(e.theta) + "," + num(e.tau) + "," + num(e.rho) +
           "," + num(e.cost) + "\n";
  }
  return out;
}

inline void write_report(const UtilityReport& r, const std::filesystem::path& json_path) {
  detail::write_text(json_path, canonical_dump(report_to_json(r)));
  auto csv_path = json_path;
  csv_path.replace_extension(".csv");
  detail::write_text(csv_path, report_to_csv(r));
}

inline UtilityReport read_report(const std::filesystem::path& json_path) {
  return report_from_json(parse_json(detail::read_text(json_path)));
}

// ---------------------------------------------------------------------------
// Imputed census

inline std::string_view row_origin(const CompletedCensus& c, Eigen::Index id) {
  if (std::binary_search(c.followup_ids.begin(), c.followup_ids.end(), id)) return "followup";
  if (std::binary_search(c.imputed_ids.begin(), c.imputed_ids.end(), id)) return "imputed";
  return "respondent";
}

/// Header plus one row per census unit in original units.
inline std::string census_to_csv(const CompletedCensus& c, const std::vector<double>& delta_grid,
                                 const std::vector<std::string>& variables, const std::vector<TransformMeta>& meta) {
  const Matrix rows = meta.empty() ? c.rows : inverse_transform(c.rows, meta);
  std::string out = "s,j,delta,l,row_id,row_origin";
  for (const auto& v : variables) out += "," + v;
  out += '\n';
  const std::string prefix = std::to_string(c.key.s + 1) + "," + std::to_string(c.key.j + 1) + "," +
                             format_double(delta_grid[c.key.delta_index]) + "," + std::to_string(c.key.l + 1) + ",";
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    out += prefix + std::to_string(i) + "," + std::string(row_origin(c, i));
    for (Eigen::Index v = 0; v < rows.cols(); ++v) out += "," + format_double(rows(i, v));
    out += '\n';
  }
  return out;
}

inline void write_imputed(const CompletedCensus& c, const std::vector<double>& delta_grid,
                          const std::vector<std::string>& variables, const std::vector<TransformMeta>& meta,
                          const std::filesystem::path& path) {
  detail::write_text(path, census_to_csv(c, delta_grid, variables, meta));
}

/// Imputed nonrespondent rows for one scenario in original units, with the
/// component each row was drawn from (1-based).
inline json imputation_preview_json(const ImputedRows& rows, const std::vector<std::string>& variables,
                                    const std::vector<TransformMeta>& meta) {
  const Matrix original = meta.empty() ? rows.rows : inverse_transform(rows.rows, meta);
  json points = json::array();
  json labels = json::array();
  for (Eigen::Index i = 0; i < original.rows(); ++i) {
    points.push_back(detail::to_json(Vector(original.row(i).transpose())));
    labels.push_back(rows.component[static_cast<std::size_t>(i)] + 1);
  }
  return {{"variables", variables}, {"points", points}, {"component", labels}};
}

}  // namespace nrfu
