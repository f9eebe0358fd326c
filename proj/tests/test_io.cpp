#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "nrfu/io.hpp"

using namespace nrfu;
namespace fs = std::filesystem;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an nrfu::Error");
  return ErrorCode::IoError;
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("nrfu_io_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

/// Two skewed variables, two clusters, some item gaps and unit nonresponse.
DataMatrix synthetic(std::uint64_t seed, Eigen::Index n = 90) {
  Rng rng = SeedContext(seed).make_rng();
  std::string csv = "x,y,respond\n";
  for (Eigen::Index i = 0; i < n; ++i) {
    const double c = i % 2 ? 1.0 : 3.0;
    const double x = std::exp(c + 0.3 * standard_normal(rng));
    const double y = std::exp(c + 0.2 * standard_normal(rng));
    const bool respond = i % 4 != 3;
    const bool gap = i % 11 == 0;
    csv += (gap ? std::string() : format_double(x)) + "," + format_double(y) + "," + (respond ? "1" : "0") + "\n";
  }
  return parse_csv(csv);
}

RunConfig quick_config() {
  RunConfig c;
  c.transform.log_all = true;
  c.model.K = 6;
  c.chain.iterations = 120;
  c.chain.burn_in = 40;
  c.chain.thin = 2;
  c.plan.delta_grid = {0.0, 0.5, 1.0};
  c.plan.M = 2;
  c.plan.R = 2;
  c.plan.refit_chain.iterations = 40;
  c.plan.refit_chain.burn_in = 10;
  c.plan.refit_chain.thin = 2;
  c.cost.fixed = 10;
  c.cost.per_unit = 3;
  c.seed = 17;
  return c;
}

const char* kConfig = R"({
  "data": {"path": "survey.csv", "respond_column": "r"},
  "transform": {"log_variables": ["a"], "zero_shift": {"a": 0.5}},
  "model": {"K": 12, "a_alpha": 0.5, "covariance": "spherical", "spherical_variance": 0.2},
  "chain": {"iterations": 300, "burn_in": 100, "thin": 4, "on_saturation": "abort"},
  "scenarios": [
    {"label": "MAR"},
    {"label": "high", "tilts": [{"rank_from_top": 1, "multiplier": 2.5}, {"component": 3, "set": 0}], "p": 0.7},
    {"label": "low", "tilts": [{"rank": 2, "multiplier": 0.5}], "p": 0.3}
  ],
  "plan": {"delta_grid": [0, 0.5], "M": 4, "R": 2, "n_max": 30, "refit_mode": "combined",
           "min_rows_per_dim": 5, "refit_chain": {"iterations": 50, "burn_in": 10, "thin": 1}, "threads": 2},
  "cost": {"fixed": 100, "per_unit": 2, "table": {"3": 4.5, "10": 1}},
  "seed": 99
})";

}  // namespace

TEST_CASE("run configuration parsing") {
  const auto c = run_config_from_json(parse_json(kConfig), "/base");
  CHECK(c.data.path == "survey.csv");
  CHECK(c.data_path() == fs::path("/base/survey.csv"));
  CHECK(c.data.respond_column == "r");
  CHECK(c.transform.log_variables == std::vector<std::string>{"a"});
  CHECK(c.transform.zero_shift.at("a") == 0.5);
  CHECK(c.model.K == 12);
  CHECK(c.model.a_alpha == 0.5);
  CHECK(c.model.b_alpha == 0.25);
  CHECK(c.model.spherical());
  CHECK(c.model.spherical_variance == 0.2);
  CHECK(c.chain.iterations == 300);
  CHECK(c.chain.thin == 4);
  CHECK(c.chain.saturation_action == SaturationAction::Abort);
  REQUIRE(c.scenarios.size() == 3);
  CHECK(c.scenarios[0].tilts.empty());
  CHECK_FALSE(c.scenarios[0].probability);
  const auto& high = c.scenarios[1];
  CHECK(*high.probability == 0.7);
  REQUIRE(high.tilts.size() == 2);
  CHECK(high.tilts[0].target == TiltSpec::Target::RankFromTop);
  CHECK(high.tilts[0].index == 1);
  CHECK(high.tilts[0].tilt == Tilt::multiplier(2.5));
  CHECK(high.tilts[1].target == TiltSpec::Target::Component);
  CHECK(high.tilts[1].tilt == Tilt::override_weight(0));
  CHECK(c.scenarios[2].tilts[0].target == TiltSpec::Target::RankFromBottom);
  CHECK(c.plan.delta_grid == std::vector<double>{0, 0.5});
  CHECK(c.plan.M == 4);
  CHECK(*c.plan.n_max == 30);
  CHECK(c.plan.refit_mode == RefitMode::ObservedPlusFollowup);
  CHECK(c.plan.min_rows_per_dim == 5);
  CHECK(c.plan.refit_chain.iterations == 50);
  CHECK(c.plan.refit_chain.thin == 1);
  CHECK(c.plan.threads == 2);
  CHECK(c.cost.fixed == 100);
  CHECK(c.cost.table->at(3) == 4.5);
  CHECK(c.seed == 99);

  const auto defaults = run_config_from_json(json::object());
  CHECK(defaults.model.K == 30);
  CHECK(defaults.chain.iterations == 5000);
  CHECK(defaults.plan.delta_grid.size() == 5);
  CHECK(defaults.plan.M == 10);
  CHECK(defaults.plan.R == 5);
  CHECK(defaults.seed == 1);
}

TEST_CASE("configuration errors") {
  auto bad = [](const char* text) { return code_of([&] { run_config_from_json(parse_json(text)); }); };
  CHECK(bad(R"({"sead": 1})") == ErrorCode::InvalidConfig);
  CHECK(bad(R"({"model": {"k": 3}})") == ErrorCode::InvalidConfig);
  CHECK(bad(R"({"plan": {"refit_mode": "both"}})") == ErrorCode::InvalidConfig);
  CHECK(bad(R"({"chain": {"iterations": 10, "burn_in": 10}})") == ErrorCode::InvalidConfig);
  CHECK(bad(R"({"chain": {"on_saturation": "ignore"}})") == ErrorCode::InvalidConfig);
  CHECK(bad(R"({"model": {"covariance": "diagonal"}})") == ErrorCode::InvalidConfig);
  CHECK(bad(R"({"scenarios": [{"label": "a"}, {"label": "a"}]})") == ErrorCode::InvalidConfig);
  CHECK(bad(R"({"scenarios": [{"label": ""}]})") == ErrorCode::InvalidConfig);
  CHECK(bad(R"({"scenarios": [{"label": "a", "tilts": [{"component": 1, "rank": 1, "multiplier": 2}]}]})") ==
        ErrorCode::InvalidConfig);
  CHECK(bad(R"({"scenarios": [{"label": "a", "tilts": [{"component": 1, "multiplier": 2, "set": 1}]}]})") ==
        ErrorCode::InvalidConfig);
  CHECK(bad(R"({"scenarios": [{"label": "a", "tilts": [{"component": 0, "multiplier": 2}]}]})") ==
        ErrorCode::InvalidConfig);
  CHECK(bad(R"({"scenarios": [{"label": "a", "tilts": [{"component": 1, "multiplier": -2}]}]})") ==
        ErrorCode::InvalidConfig);
  CHECK(bad(R"({"cost": {"table": {"row3": 1}}})") == ErrorCode::InvalidConfig);
  CHECK(bad(R"({"cost": {"fixed": -1}})") == ErrorCode::ValidationError);
  CHECK(bad(R"({"seed": "one"})") == ErrorCode::InvalidConfig);
  CHECK(code_of([] { parse_json("{\"seed\": "); }) == ErrorCode::ParseError);
  CHECK(code_of([] { load_run_config("/nonexistent/config.json"); }) == ErrorCode::IoError);
}

TEST_CASE("configuration pieces round trip") {
  const auto c = run_config_from_json(parse_json(kConfig));
  for (const auto& s : c.scenarios) {
    const auto back = scenario_from_json(scenario_to_json(s));
    CHECK(back.label == s.label);
    CHECK(back.probability == s.probability);
    REQUIRE(back.tilts.size() == s.tilts.size());
    for (std::size_t t = 0; t < s.tilts.size(); ++t) {
      CHECK(back.tilts[t].target == s.tilts[t].target);
      CHECK(back.tilts[t].index == s.tilts[t].index);
      CHECK(back.tilts[t].tilt == s.tilts[t].tilt);
    }
  }
  HyperParams hp = c.model.resolved(3);
  hp.mu0 = Vector::LinSpaced(3, -1, 1);
  const auto back = hyperparams_from_json(hyperparams_to_json(hp));
  CHECK(back.K == hp.K);
  CHECK(back.mu0 == hp.mu0);
  CHECK(back.f == hp.f);
  CHECK(back.mode == hp.mode);
}

TEST_CASE("relative data paths resolve against the config file") {
  const auto dir = scratch_dir("config");
  detail::write_text(dir / "c.json", R"({"data": {"path": "d.csv"}})");
  CHECK(load_run_config(dir / "c.json").data_path() == dir / "d.csv");
  fs::remove_all(dir);
}

TEST_CASE("canonical JSON") {
  json j = {{"b", 1}, {"a", {{"z", 0.1}, {"y", detail::number(NAN)}}}};
  const auto text = canonical_dump(j);
  CHECK(text.find("\"a\"") < text.find("\"b\""));
  CHECK(text.find("\"y\": null") < text.find("\"z\": 0.1"));
  CHECK(text.back() == '\n');
  CHECK(canonical_dump(parse_json(text)) == text);
  const double third = 1.0 / 3.0;
  CHECK(parse_json(canonical_dump(json(third))).get<double>() == third);
}

TEST_CASE("fit pipeline and MAP round trip") {
  const auto config = quick_config();
  const auto fit = run_fit(synthetic(1), config.transform, config.model, config.chain, config.seed);
  CHECK(fit.data.transformed());
  CHECK(fit.chain.kept.size() == config.chain.kept());

  const auto j = map_to_json(fit.chain.map);
  const auto map = map_from_json(parse_json(canonical_dump(j)));
  CHECK(map.mu == fit.chain.map.mu);
  CHECK(map.pi == fit.chain.map.pi);
  CHECK(map.occupied == fit.chain.map.occupied);
  CHECK(map.rank_order == fit.chain.map.rank_order);
  CHECK(map.delta == fit.chain.map.delta);
  CHECK(map.y_min == fit.chain.map.y_min);
  for (std::size_t k = 0; k < map.K(); ++k) CHECK(map.sigma[k] == fit.chain.map.sigma[k]);
  CHECK(map.log_posterior == fit.chain.map.log_posterior);
  CHECK(map.iteration == fit.chain.map.iteration);

  auto broken = j;
  broken["rank"][0] = 99;
  CHECK(code_of([&] { map_from_json(broken); }) == ErrorCode::ParseError);
  broken = j;
  broken["occupied"].erase(0);
  CHECK(code_of([&] { map_from_json(broken); }) == ErrorCode::DimensionMismatch);
  CHECK(code_of([&] { map_from_json(json::object()); }) == ErrorCode::ParseError);

  const auto meta = transform_from_json(transform_to_json(fit.data.transform));
  REQUIRE(meta.size() == 2);
  CHECK(meta[1].center == fit.data.transform[1].center);
  CHECK(meta[1].log_applied);

  // Same seed, same fit.
  const auto again = run_fit(synthetic(1), config.transform, config.model, config.chain, config.seed);
  CHECK(canonical_dump(fit_summary_json(again, config.chain)) == canonical_dump(fit_summary_json(fit, config.chain)));
}

TEST_CASE("fit summary and scatter sample") {
  const auto config = quick_config();
  const auto fit = run_fit(synthetic(2), config.transform, config.model, config.chain, config.seed);
  const auto s = fit_summary_json(fit, config.chain);
  for (const char* key : {"n", "n_t", "p", "variables", "seed", "model", "chain", "transform", "map", "pi_mar",
                          "diagnostics", "scatter"}) {
    CHECK(s.contains(key));
  }
  CHECK(s["n"] == 90);
  CHECK(s["n_t"] == fit.data.n_t());
  double total = 0;
  for (const auto& x : s["pi_mar"]) total += x.get<double>();
  CHECK(std::abs(total - 1.0) < 1e-12);
  CHECK(s["diagnostics"]["occupied_trace"].size() == config.chain.iterations);

  const auto& scatter = s["scatter"];
  const auto occupied = std::count(fit.chain.map.occupied.begin(), fit.chain.map.occupied.end(), true);
  CHECK(scatter["ellipses"].size() == std::size_t(occupied));
  CHECK(scatter["points"].size() == std::size_t(fit.data.n_t()));
  for (const auto& e : scatter["ellipses"]) {
    CHECK(e["major"].get<double>() >= e["minor"].get<double>());
    CHECK(e["component"].get<int>() >= 1);
  }
  const auto small = scatter_sample_json(fit.data, fit.chain.map, 3, 10);
  CHECK(small["points"].size() == 10);
  CHECK(small == scatter_sample_json(fit.data, fit.chain.map, 3, 10));
  CHECK(small["row_ids"] != scatter_sample_json(fit.data, fit.chain.map, 4, 10)["row_ids"]);
}

TEST_CASE("report files round trip and are deterministic") {
  auto config = quick_config();
  config.scenarios = run_config_from_json(parse_json(R"({"scenarios": [
    {"label": "MAR", "p": 0.5}, {"label": "top", "tilts": [{"rank_from_top": 1, "multiplier": 4}], "p": 0.5}]})"))
                         .scenarios;
  const auto fit = run_fit(synthetic(3), config.transform, config.model, config.chain, config.seed);
  const auto report = simulate_from_fit(fit, config.scenarios, config.plan, config.cost, config.seed);
  REQUIRE(report.failures.empty());
  CHECK(report.expected.size() == 3);

  const auto dir = scratch_dir("report");
  write_report(report, dir / "report.json");
  const auto back = read_report(dir / "report.json");
  CHECK(canonical_dump(report_to_json(back)) == canonical_dump(report_to_json(report)));
  CHECK(back.cells.size() == report.cells.size());
  CHECK(back.cell(1, 1).replicates.size() == config.plan.M * config.plan.R);

  const auto csv = detail::read_text(dir / "report.csv");
  CHECK(csv == report_to_csv(report));
  CHECK(csv.rfind("scenario,delta,n_f,variable,theta,tau,rho,cost\n", 0) == 0);
  const auto lines = std::count(csv.begin(), csv.end(), '\n');
  CHECK(lines == 1 + 2 * 3 * (2 + 1) + 3);

  // A second run with the same seed writes identical bytes.
  const auto again = simulate_from_fit(fit, config.scenarios, config.plan, config.cost, config.seed);
  write_report(again, dir / "again.json");
  CHECK(detail::read_text(dir / "again.json") == detail::read_text(dir / "report.json"));
  CHECK(detail::read_text(dir / "again.csv") == csv);

  auto corrupt = report_to_json(report);
  corrupt["cells"].erase(0);
  CHECK(code_of([&] { report_from_json(corrupt); }) == ErrorCode::ParseError);
  CHECK(code_of([&] { read_report(dir / "missing.json"); }) == ErrorCode::IoError);
  fs::remove_all(dir);
}

TEST_CASE("census CSV") {
  const auto config = quick_config();
  const auto fit = run_fit(synthetic(4), config.transform, config.model, config.chain, config.seed);
  std::vector<CompletedCensus> censuses;
  std::mutex m;
  simulate_from_fit(fit, {}, config.plan, config.cost, config.seed, {}, [&](const CompletedCensus& c) {
    std::lock_guard lock(m);
    censuses.push_back(c);
  });
  REQUIRE(censuses.size() == 3 * config.plan.M * config.plan.R);
  for (const auto& c : censuses) {
    const auto csv = census_to_csv(c, config.plan.delta_grid, fit.data.names, fit.data.transform);
    REQUIRE(std::count(csv.begin(), csv.end(), '\n') == fit.data.n() + 1);
    const auto count = [&](const std::string& what) {
      std::size_t k = 0;
      for (auto pos = csv.find("," + what + ","); pos != std::string::npos; pos = csv.find("," + what + ",", pos + 1)) ++k;
      return k;
    };
    REQUIRE(count("respondent") == std::size_t(fit.data.n_t()));
    REQUIRE(count("followup") == c.followup_ids.size());
    REQUIRE(count("imputed") == c.imputed_ids.size());
  }
  // Respondent rows come back in original units.
  const auto& c = censuses.front();
  const auto csv = census_to_csv(c, config.plan.delta_grid, fit.data.names, fit.data.transform);
  const auto raw = synthetic(4);
  const auto first_line = csv.substr(csv.find('\n') + 1, csv.find('\n', csv.find('\n') + 1) - csv.find('\n') - 1);
  const auto last_comma = first_line.rfind(',');
  CHECK(std::abs(std::stod(first_line.substr(last_comma + 1)) - raw.values(0, 1)) < 1e-9 * raw.values(0, 1));
}

TEST_CASE("imputation preview") {
  const auto config = quick_config();
  const auto fit = run_fit(synthetic(5), config.transform, config.model, config.chain, config.seed);
  Rng rng = SeedContext(1).make_rng();
  const auto rows = impute_unit_nonrespondents(rng, fit.chain.map, build_mar_scenario(fit.chain.map), 7);
  const auto j = imputation_preview_json(rows, fit.data.names, fit.data.transform);
  CHECK(j["points"].size() == 7);
  CHECK(j["component"].size() == 7);
  CHECK(j["variables"] == json({"x", "y"}));
  for (const auto& p : j["points"]) CHECK(p[0].get<double>() > 0.0);  // log scale maps back to positive values
}
