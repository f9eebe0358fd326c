// Command-line driver: fit, impute, simulate, report, serve.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "nrfu/service.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run configuration")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "master seed (overrides the config)");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_flag("--quiet", c.quiet, "no progress output");
}

nrfu::RunConfig load_config(const Common& c) {
  auto config = nrfu::load_run_config(c.config);
  if (c.seed) config.seed = *c.seed;
  return config;
}

nrfu::DataMatrix load_data(const nrfu::RunConfig& config) {
  if (config.data.path.empty()) throw nrfu::Error(nrfu::ErrorCode::InvalidConfig, "data.path is required");
  nrfu::CsvOptions opts;
  opts.respond_column = config.data.respond_column;
  return nrfu::load_csv(config.data_path().string(), opts);
}

nrfu::ProgressFn chain_progress(bool quiet, const char* label) {
  if (quiet) return {};
  return [label](std::size_t done, std::size_t total) {
    if (done % 100 == 0 || done == total) {
      std::fprintf(stderr, "\r%s %zu/%zu", label, done, total);
      if (done == total) std::fputc('\n', stderr);
    }
  };
}

/// Fits from scratch, or rebuilds the fit from a saved summary when given.
nrfu::FitOutput obtain_fit(const nrfu::RunConfig& config, const std::string& fit_path, bool quiet) {
  const auto raw = load_data(config);
  if (fit_path.empty()) {
    return nrfu::run_fit(raw, config.transform, config.model, config.chain, config.seed, chain_progress(quiet, "fit"));
  }
  const auto saved = nrfu::parse_json(nrfu::detail::read_text(fit_path));
  nrfu::FitOutput fit;
  fit.data = nrfu::preprocess(raw, config.transform);
  const auto saved_meta = nrfu::transform_from_json(saved.at("transform"));
  if (nrfu::transform_to_json(saved_meta) != nrfu::transform_to_json(fit.data.transform)) {
    throw nrfu::Error(nrfu::ErrorCode::InvalidConfig, "the saved fit was made with a different transform or dataset");
  }
  fit.chain.map = nrfu::map_from_json(saved.at("map"));
  fit.chain.hp = nrfu::hyperparams_from_json(saved.at("model")).resolved(fit.data.p());
  fit.seed = config.seed;
  return fit;
}

void write(const fs::path& path, const std::string& text) {
  nrfu::detail::write_text(path, text);
  std::cout << path.string() << '\n';
}

int cmd_fit(const Common& c) {
  const auto config = load_config(c);
  const auto fit = nrfu::run_fit(load_data(config), config.transform, config.model, config.chain, config.seed,
                                 chain_progress(c.quiet, "fit"));
  const auto summary = nrfu::fit_summary_json(fit, config.chain);
  write(fs::path(c.out) / "fit.json", nrfu::canonical_dump(summary));
  write(fs::path(c.out) / "scatter.json", nrfu::canonical_dump(summary.at("scatter")));
  if (fit.chain.diagnostics.saturated) {
    std::cerr << "warning: every component was occupied at sweep " << fit.chain.diagnostics.first_saturation_sweep
              << "; consider a larger K\n";
  }
  return 0;
}

int cmd_impute(const Common& c, const std::string& fit_path) {
  const auto config = load_config(c);
  const auto fit = obtain_fit(config, fit_path, c.quiet);
  const auto scenarios = nrfu::resolve_scenarios(config.scenarios, fit.chain.map);
  const auto nonresp = fit.data.nonrespondents();
  const auto resp = fit.data.respondents();
  const auto input = nrfu::simulation_input(fit.data, fit.chain.map, fit.chain.hp, config.seed);
  const auto& meta = fit.data.transform;
  for (std::size_t s = 0; s < scenarios.size(); ++s) {
    nrfu::Rng rng = nrfu::SeedContext(config.seed).child({nrfu::kPreviewStream, s}).make_rng();
    const auto imputed =
        nrfu::impute_unit_nonrespondents(rng, fit.chain.map, scenarios[s], static_cast<Eigen::Index>(nonresp.size()));
    nrfu::Matrix full(fit.data.n(), fit.data.p());
    std::vector<int> component(static_cast<std::size_t>(fit.data.n()), 0);
    for (std::size_t i = 0; i < resp.size(); ++i) full.row(resp[i]) = input.y_t.row(static_cast<Eigen::Index>(i));
    for (std::size_t i = 0; i < nonresp.size(); ++i) {
      full.row(nonresp[i]) = imputed.rows.row(static_cast<Eigen::Index>(i));
      component[static_cast<std::size_t>(nonresp[i])] = imputed.component[i] + 1;
    }
    const auto original = nrfu::inverse_transform(full, meta);
    std::string csv = "row_id,row_origin,component";
    for (const auto& name : fit.data.names) csv += "," + name;
    csv += '\n';
    for (Eigen::Index i = 0; i < original.rows(); ++i) {
      const int k = component[static_cast<std::size_t>(i)];
      csv += std::to_string(i) + (k ? ",imputed," + std::to_string(k) : std::string(",respondent,"));
      for (Eigen::Index v = 0; v < original.cols(); ++v) csv += "," + nrfu::format_double(original(i, v));
      csv += '\n';
    }
    write(fs::path(c.out) / ("imputed_" + scenarios[s].label + ".csv"), csv);
  }
  return 0;
}

int cmd_simulate(const Common& c, const std::string& fit_path, std::optional<std::size_t> threads,
                 std::optional<std::string> refit_mode, bool write_censuses) {
  auto config = load_config(c);
  if (threads) config.plan.threads = *threads;
  if (refit_mode) config.plan.refit_mode = nrfu::parse_refit_mode(*refit_mode);
  const auto fit = obtain_fit(config, fit_path, c.quiet);

  nrfu::PlanProgressFn progress;
  std::mutex io_mutex;
  if (!c.quiet) {
    progress = [&io_mutex](const nrfu::ProgressEvent& e) {
      if (e.kind != nrfu::ProgressEvent::Kind::Finished) return;
      std::lock_guard lock(io_mutex);
      std::fprintf(stderr, "\rsimulate %zu/%zu", e.done, e.total);
      if (e.done == e.total) std::fputc('\n', stderr);
    };
  }
  nrfu::CensusSink sink;
  const fs::path census_dir = fs::path(c.out) / "censuses";
  if (write_censuses) {
    sink = [&](const nrfu::CompletedCensus& census) {
      const auto name = "census_s" + std::to_string(census.key.s + 1) + "_j" + std::to_string(census.key.j + 1) +
                        "_d" + std::to_string(census.key.delta_index + 1) + "_l" + std::to_string(census.key.l + 1) +
                        ".csv";
      nrfu::write_imputed(census, config.plan.delta_grid, fit.data.names, fit.data.transform, census_dir / name);
    };
  }
  const auto report =
      nrfu::simulate_from_fit(fit, config.scenarios, config.plan, config.cost, config.seed, progress, sink);
  const fs::path path = fs::path(c.out) / "report.json";
  nrfu::write_report(report, path);
  std::cout << path.string() << '\n' << fs::path(path).replace_extension(".csv").string() << '\n';
  for (const auto& f : report.failures) {
    std::cerr << "failed: scenario " << report.scenario_labels[f.key.s] << " truth " << f.key.j + 1 << " delta "
              << report.delta_grid[f.key.delta_index] << ": " << f.message << '\n';
  }
  return report.failures.empty() ? 0 : 3;
}

int cmd_report(const std::string& in, const std::string& out) {
  const auto report = nrfu::read_report(in);
  const auto csv = nrfu::report_to_csv(report);
  if (!out.empty()) write(fs::path(out) / (fs::path(in).stem().string() + ".csv"), csv);
  std::printf("%-16s %6s %6s %10s %10s %10s %12s\n", "scenario", "delta", "n_f", "theta", "tau", "rho", "cost");
  for (const auto& cell : report.cells) {
    std::printf("%-16s %6.3g %6lld %10.4g %10.4g %10.4g %12.6g\n", report.scenario_labels[cell.scenario].c_str(),
                cell.delta, static_cast<long long>(cell.n_f), cell.theta.aggregate, cell.tau.aggregate, cell.rho,
                cell.cost);
  }
  for (const auto& e : report.expected) {
    std::printf("%-16s %6.3g %6s %10.4g %10.4g %10.4g %12.6g\n", "expected", e.delta, "", e.theta, e.tau, e.rho,
                e.cost);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nonresponse follow-up planning with mixture-model imputation"};
  app.require_subcommand(1);

  Common fit_opts, impute_opts, sim_opts;
  auto* fit = app.add_subcommand("fit", "fit the mixture model to respondents");
  add_common(fit, fit_opts);

  auto* impute = app.add_subcommand("impute", "impute unit nonrespondents under each scenario");
  add_common(impute, impute_opts);
  std::string impute_fit;
  impute->add_option("--fit", impute_fit, "reuse a saved fit.json")->check(CLI::ExistingFile);

  auto* simulate = app.add_subcommand("simulate", "run the follow-up sampling simulation");
  add_common(simulate, sim_opts);
  std::string sim_fit;
  std::optional<std::size_t> threads;
  std::optional<std::string> refit_mode;
  bool write_censuses = false;
  simulate->add_option("--fit", sim_fit, "reuse a saved fit.json")->check(CLI::ExistingFile);
  simulate->add_option("--threads", threads, "worker threads (0 = all cores)");
  simulate->add_option("--refit-mode", refit_mode, "auto, followup or combined")
      ->check(CLI::IsMember({"auto", "followup", "combined"}));
  simulate->add_flag("--write-censuses", write_censuses, "write every completed census as CSV");

  auto* report = app.add_subcommand("report", "summarize a report.json and write its CSV");
  std::string report_in, report_out;
  report->add_option("report", report_in, "report.json")->required()->check(CLI::ExistingFile);
  report->add_option("--out", report_out, "directory for the CSV");

  auto* serve = app.add_subcommand("serve", "start the HTTP service");
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t workers = 1;
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "listen port");
  serve->add_option("--workers", workers, "job worker threads");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*fit) return cmd_fit(fit_opts);
    if (*impute) return cmd_impute(impute_opts, impute_fit);
    if (*simulate) return cmd_simulate(sim_opts, sim_fit, threads, refit_mode, write_censuses);
    if (*report) return cmd_report(report_in, report_out);
    if (*serve) {
      std::cerr << "listening on " << host << ":" << port << '\n';
      return nrfu::serve(host, port, {workers}) ? 0 : 1;
    }
  } catch (const nrfu::Error& e) {
    std::cerr << "error [" << nrfu::to_string(e.code()) << "]: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
