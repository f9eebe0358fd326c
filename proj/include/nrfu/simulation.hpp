#pragma once

// Follow-up sampling simulation: hypothetical true datasets per scenario,
// follow-up samples at each delta, refits, multiple imputation of the
// remaining nonrespondents, and the accuracy/cost measures per replicate.

#include <atomic>
#include <bit>
#include <cfenv>
#include <exception>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "nrfu/data.hpp"
#include "nrfu/gibbs.hpp"
#include "nrfu/measures.hpp"
#include "nrfu/pattern_mixture.hpp"

namespace nrfu {

enum class RefitMode { FollowupOnly, ObservedPlusFollowup, Auto };

inline std::string_view to_string(RefitMode m) {
  switch (m) {
    case RefitMode::FollowupOnly: return "followup";
    case RefitMode::ObservedPlusFollowup: return "combined";
    case RefitMode::Auto: return "auto";
  }
  return "auto";
}

inline RefitMode parse_refit_mode(std::string_view s) {
  if (s == "followup") return RefitMode::FollowupOnly;
  if (s == "combined") return RefitMode::ObservedPlusFollowup;
  if (s == "auto") return RefitMode::Auto;
  throw Error(ErrorCode::InvalidConfig, "refit mode must be auto, followup or combined");
}

struct SimulationPlan {
  std::vector<Scenario> scenarios;
  std::vector<double> delta_grid{0.0, 0.25, 0.5, 0.75, 1.0};
  std::size_t M = 10;
  std::size_t R = 5;
  std::optional<Eigen::Index> n_max;  ///< defaults to the nonrespondent count
  RefitMode refit_mode = RefitMode::Auto;
  std::size_t min_rows_per_dim = 10;
  CostParams cost;
  std::uint64_t master_seed = 1;
  ChainConfig refit_chain{1500, 500, 2, SaturationAction::Warn};
  PropensityOptions propensity;
  std::size_t threads = 1;

  void validate(Eigen::Index n0) const {
    auto bad = [](const std::string& what) { throw Error(ErrorCode::InvalidConfig, what); };
    if (scenarios.empty()) bad("a plan needs at least one scenario");
    if (M < 1 || R < 1) bad("M and R must be at least 1");
    if (delta_grid.empty()) bad("delta grid is empty");
    for (double d : delta_grid)
      if (!(d >= 0.0 && d <= 1.0)) bad("delta values must lie in [0, 1]");
    if (n0 < 1) bad("there are no nonrespondents to simulate");
    if (n_max && (*n_max < 0 || *n_max > n0)) bad("n_max must lie in [0, n0]");
    refit_chain.validate();
    if (refit_chain.kept() < R) bad("refit chain keeps fewer states than R");
    cost.validate();
    std::size_t with_p = 0;
    for (const auto& s : scenarios) with_p += s.subjective_prob.has_value();
    if (with_p != 0) {
      if (with_p != scenarios.size()) {
        throw Error(ErrorCode::ProbNotNormalized, "either every scenario or none carries a probability");
      }
      std::vector<double> p;
      for (const auto& s : scenarios) p.push_back(*s.subjective_prob);
      validate_probabilities(p);
    }
  }

  [[nodiscard]] Eigen::Index resolved_n_max(Eigen::Index n0) const { return n_max.value_or(n0); }
};

struct ReplicateKey {
  std::size_t s = 0;
  std::size_t j = 0;
  std::size_t delta_index = 0;
  std::size_t l = 0;
  friend bool operator==(const ReplicateKey&, const ReplicateKey&) = default;
};

/// Everything a simulation needs from the initial fit: the respondent block
/// (item-missing cells already completed), row bookkeeping and the MAP model.
struct SimulationInput {
  Matrix y_t;                                 ///< n_t x p, model scale
  std::vector<Eigen::Index> respondent_ids;   ///< original row ids of y_t
  std::vector<Eigen::Index> nonrespondent_ids;
  Eigen::Index n = 0;
  MapEstimate map;
  HyperParams hp;
  std::vector<TransformMeta> transform;       ///< empty means identity
  std::vector<std::string> variables;

  [[nodiscard]] Eigen::Index n0() const { return static_cast<Eigen::Index>(nonrespondent_ids.size()); }
  [[nodiscard]] Eigen::Index p() const { return y_t.cols(); }
};

/// Completes item-missing respondent cells once under the MAP model: the
/// component is drawn given the observed cells, then the missing cells from
/// the conditional normal.
inline Matrix complete_respondents(Rng& rng, const Matrix& rows, const MaskMatrix& missing, const MapEstimate& map) {
  const Vector pi = zero_empty_components(map.pi, map.occupied);
  Matrix out = rows;
  const std::size_t K = map.K();
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    if (!missing.row(i).any()) continue;
    std::vector<Eigen::Index> obs;
    for (Eigen::Index j = 0; j < rows.cols(); ++j)
      if (!missing(i, j)) obs.push_back(j);
    Vector y_o(static_cast<Eigen::Index>(obs.size()));
    for (std::size_t a = 0; a < obs.size(); ++a) y_o(static_cast<Eigen::Index>(a)) = rows(i, obs[a]);
    std::vector<double> lw(K, -std::numeric_limits<double>::infinity());
    double max_lw = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      if (pi(static_cast<Eigen::Index>(k)) <= 0.0) continue;
      Vector mu_o(y_o.size());
      Matrix s_oo(y_o.size(), y_o.size());
      for (std::size_t a = 0; a < obs.size(); ++a) {
        mu_o(static_cast<Eigen::Index>(a)) = map.mu(static_cast<Eigen::Index>(k), obs[a]);
        for (std::size_t b = 0; b < obs.size(); ++b)
          s_oo(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = map.sigma[k].matrix()(obs[a], obs[b]);
      }
      lw[k] = std::log(pi(static_cast<Eigen::Index>(k))) + mvn_logpdf(y_o, mu_o, PdMatrix(s_oo));
      max_lw = std::max(max_lw, lw[k]);
    }
    std::vector<double> w(K);
    for (std::size_t k = 0; k < K; ++k) w[k] = std::isfinite(lw[k]) ? std::exp(lw[k] - max_lw) : 0.0;
    const auto k = categorical_sample(rng, std::span<const double>(w));
    out.row(i) = impute_item_missing(rng, rows.row(i).transpose(), missing.row(i).transpose(),
                                     map.mu.row(static_cast<Eigen::Index>(k)).transpose(), map.sigma[k])
                     .transpose();
  }
  return out;
}

/// Builds the simulation input from preprocessed data and its fitted MAP.
inline SimulationInput prepare_simulation(const DataMatrix& data, const MapEstimate& map, const HyperParams& hp,
                                          const SeedContext& ctx) {
  SimulationInput in;
  in.respondent_ids = data.respondents();
  in.nonrespondent_ids = data.nonrespondents();
  in.n = data.n();
  in.map = map;
  in.hp = hp.resolved(data.p());
  in.transform = data.transform;
  in.variables = data.names;
  Rng rng = ctx.make_rng();
  in.y_t = complete_respondents(rng, data.respondent_values(), data.respondent_missing(), map);
  return in;
}

/// Hypothetical complete dataset for one (scenario, truth index): n x p in
/// original row order, respondent rows identical across truths.
inline std::vector<Matrix> generate_true_datasets(const SeedContext& ctx, const SimulationInput& in,
                                                  const Vector& pi_star, std::size_t M) {
  if (in.n0() < 1) throw Error(ErrorCode::DegenerateData, "no nonrespondents");
  std::vector<Matrix> truths;
  truths.reserve(M);
  for (std::size_t j = 0; j < M; ++j) {
    Rng rng = ctx.child(j).make_rng();
    const auto imputed = impute_unit_nonrespondents(rng, in.map, pi_star, in.n0());
    Matrix full(in.n, in.p());
    for (std::size_t i = 0; i < in.respondent_ids.size(); ++i)
      full.row(in.respondent_ids[i]) = in.y_t.row(static_cast<Eigen::Index>(i));
    for (std::size_t i = 0; i < in.nonrespondent_ids.size(); ++i)
      full.row(in.nonrespondent_ids[i]) = imputed.rows.row(static_cast<Eigen::Index>(i));
    truths.push_back(std::move(full));
  }
  return truths;
}

/// n_f = round-half-to-even(delta * n_max).
inline Eigen::Index followup_size(double delta, Eigen::Index n_max) {
  const int old_mode = std::fegetround();
  std::fesetround(FE_TONEAREST);
  const auto n_f = static_cast<Eigen::Index>(std::nearbyint(delta * static_cast<double>(n_max)));
  std::fesetround(old_mode);
  return n_f;
}

/// Simple random sample without replacement of n_f positions out of n0,
/// returned in ascending order.
inline std::vector<Eigen::Index> draw_followup_sample(Rng& rng, Eigen::Index n0, double delta, Eigen::Index n_max) {
  const Eigen::Index n_f = std::min(followup_size(delta, n_max), n0);
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n0));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  for (Eigen::Index i = 0; i < n_f; ++i) {
    std::uniform_int_distribution<Eigen::Index> pick(i, n0 - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  idx.resize(static_cast<std::size_t>(n_f));
  std::sort(idx.begin(), idx.end());
  return idx;
}

enum class FitSet { Respondents, Followup, Combined };

inline FitSet choose_fit_set(RefitMode mode, Eigen::Index n_f, Eigen::Index p, std::size_t min_rows_per_dim) {
  if (n_f == 0) return FitSet::Respondents;
  switch (mode) {
    case RefitMode::FollowupOnly: return FitSet::Followup;
    case RefitMode::ObservedPlusFollowup: return FitSet::Combined;
    case RefitMode::Auto:
      return n_f >= static_cast<Eigen::Index>(min_rows_per_dim) * p ? FitSet::Followup : FitSet::Combined;
  }
  return FitSet::Combined;
}

struct RefitResult {
  FitSet fit_set = FitSet::Respondents;
  ChainResult chain;
};

inline RefitResult refit_model(Rng& rng, const Matrix& y_t, const Matrix& y_f, RefitMode mode,
                               std::size_t min_rows_per_dim, const HyperParams& hp, const ChainConfig& cfg) {
  RefitResult out;
  out.fit_set = choose_fit_set(mode, y_f.rows(), y_t.cols(), min_rows_per_dim);
  Matrix fit_rows;
  switch (out.fit_set) {
    case FitSet::Respondents: fit_rows = y_t; break;
    case FitSet::Followup: fit_rows = y_f; break;
    case FitSet::Combined:
      fit_rows.resize(y_t.rows() + y_f.rows(), y_t.cols());
      fit_rows << y_t, y_f;
      break;
  }
  if (fit_rows.rows() == 0) throw Error(ErrorCode::DegenerateData, "the refit set is empty");
  out.chain = run_chain(rng, fit_rows, MaskMatrix(), hp, cfg);
  return out;
}

/// Y_delta = (Y_t, Y_f, Y_0f) laid out in original row order.
struct CompletedCensus {
  Matrix rows;                                ///< n x p, model scale
  std::vector<Eigen::Index> respondent_ids;
  std::vector<Eigen::Index> followup_ids;
  std::vector<Eigen::Index> imputed_ids;
  ReplicateKey key;
};

/// Kept-state indices for R imputations, spread as far apart as possible.
inline std::vector<std::size_t> spaced_states(std::size_t available, std::size_t R) {
  if (available < R) {
    throw Error(ErrorCode::InsufficientChainStates,
                std::to_string(available) + " states available, " + std::to_string(R) + " needed");
  }
  std::vector<std::size_t> out(R);
  if (R == 1) {
    out[0] = available - 1;
    return out;
  }
  for (std::size_t l = 0; l < R; ++l) out[l] = (l * (available - 1)) / (R - 1);
  return out;
}

/// R completed versions of one truth: follow-up rows copied from the truth,
/// the remaining nonrespondents drawn from the refit posterior predictive
/// (one retained state per imputation, occupied components only).
inline std::vector<CompletedCensus> generate_completed_datasets(const SeedContext& ctx, const SimulationInput& in,
                                                                const Matrix& truth,
                                                                const std::vector<Eigen::Index>& followup_positions,
                                                                const RefitResult* refit, std::size_t R,
                                                                const ReplicateKey& base_key) {
  std::vector<bool> sampled(static_cast<std::size_t>(in.n0()), false);
  for (Eigen::Index pos : followup_positions) sampled[static_cast<std::size_t>(pos)] = true;
  std::vector<Eigen::Index> followup_ids, remaining_ids;
  for (std::size_t i = 0; i < sampled.size(); ++i)
    (sampled[i] ? followup_ids : remaining_ids).push_back(in.nonrespondent_ids[i]);

  std::vector<std::size_t> states;
  if (!remaining_ids.empty()) {
    if (refit == nullptr) throw Error(ErrorCode::InsufficientChainStates, "no refit model for the remaining rows");
    states = spaced_states(refit->chain.kept.size(), R);
  }
  std::vector<CompletedCensus> out;
  out.reserve(R);
  for (std::size_t l = 0; l < R; ++l) {
    CompletedCensus c;
    c.rows = truth;
    c.respondent_ids = in.respondent_ids;
    c.followup_ids = followup_ids;
    c.imputed_ids = remaining_ids;
    c.key = base_key;
    c.key.l = l;
    if (!remaining_ids.empty()) {
      Rng rng = ctx.child(l).make_rng();
      const MixtureState& st = refit->chain.kept[states[l]];
      // Empty components carry prior draws only; they get no weight, as for the MAP.
      const auto counts = component_counts(st.z, st.K());
      Vector weights = st.pi;
      for (std::size_t k = 0; k < counts.size(); ++k)
        if (counts[k] == 0) weights[static_cast<Eigen::Index>(k)] = 0.0;
      for (Eigen::Index id : remaining_ids) {
        const auto k = categorical_sample(rng, weights);
        c.rows.row(id) = mvn_sample(rng, st.mu.row(static_cast<Eigen::Index>(k)).transpose(), st.sigma[k]).transpose();
      }
    }
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report

struct ReplicateResult {
  ReplicateKey key;
  Vector theta;   ///< signed relative differences per variable
  Vector tau;     ///< signed standardized differences per variable
  double rho = 0.0;
  double cost = 0.0;
  bool propensity_converged = true;
};

struct CellResult {
  std::size_t scenario = 0;
  std::size_t delta_index = 0;
  double delta = 0.0;
  Eigen::Index n_f = 0;
  MeasureSummary theta;
  MeasureSummary tau;
  double rho = 0.0;
  double cost = 0.0;
  std::vector<ReplicateResult> replicates;
};

struct ExpectedResult {
  double delta = 0.0;
  double theta = 0.0;
  double tau = 0.0;
  double rho = 0.0;
  double cost = 0.0;
};

struct ReplicateFailure {
  ReplicateKey key;
  std::string message;
};

struct UtilityReport {
  std::vector<std::string> variables;
  std::vector<std::string> scenario_labels;
  std::vector<std::optional<double>> subjective_probs;
  std::vector<double> delta_grid;
  RefitMode refit_mode = RefitMode::Auto;
  std::uint64_t master_seed = 0;
  std::size_t M = 0;
  std::size_t R = 0;
  Eigen::Index n = 0;
  Eigen::Index n_t = 0;
  Eigen::Index n0 = 0;
  Eigen::Index n_max = 0;
  std::vector<CellResult> cells;  ///< scenario-major, then delta in grid order
  std::vector<ExpectedResult> expected;
  std::vector<ReplicateFailure> failures;

  [[nodiscard]] const CellResult& cell(std::size_t s, std::size_t d) const { return cells[s * delta_grid.size() + d]; }
};

struct ProgressEvent {
  enum class Kind { Started, Finished };
  Kind kind = Kind::Started;
  std::size_t s = 0;
  std::size_t j = 0;
  std::size_t delta_index = 0;
  std::size_t done = 0;   ///< finished units so far
  std::size_t total = 0;  ///< (s, j, delta) units in the plan
};

/// Called from worker threads.
using PlanProgressFn = std::function<void(const ProgressEvent&)>;
/// Receives every completed census; called from worker threads.
using CensusSink = std::function<void(const CompletedCensus&)>;

namespace detail {

inline std::size_t resolve_threads(std::size_t requested) {
  if (requested == 0) requested = std::max(1u, std::thread::hardware_concurrency());
  return requested;
}

/// Runs fn(i) for i in [0, count) on a bounded pool. Exceptions stay with
/// their task and are returned in index order.
inline std::vector<std::exception_ptr> parallel_for(std::size_t count, std::size_t threads,
                                                    const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  threads = std::min(resolve_threads(threads), std::max<std::size_t>(count, 1));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  return errors;
}

inline std::string describe(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const std::exception& ex) {
    return ex.what();
  } catch (...) {
    return "unknown error";
  }
}

inline Matrix to_original(const Matrix& rows, const std::vector<TransformMeta>& meta) {
  return meta.empty() ? rows : inverse_transform(rows, meta);
}

// Stream tags under the master seed.
inline constexpr std::uint64_t kTruthStream = 1;
inline constexpr std::uint64_t kFollowupStream = 2;
inline constexpr std::uint64_t kRefitStream = 3;
inline constexpr std::uint64_t kImputeStream = 4;

}  // namespace detail

/// Streams are keyed by the delta value itself, so reordering or extending
/// the grid leaves existing replicates untouched.
inline std::uint64_t delta_key(double delta) { return std::bit_cast<std::uint64_t>(delta); }

inline UtilityReport run_plan(const SimulationPlan& plan, const SimulationInput& in,
                              const PlanProgressFn& progress = {}, const CensusSink& sink = {}) {
  plan.validate(in.n0());
  const std::size_t S = plan.scenarios.size();
  const std::size_t G = plan.delta_grid.size();
  const Eigen::Index n_max = plan.resolved_n_max(in.n0());
  const SeedContext root(plan.master_seed);

  UtilityReport report;
  report.variables = in.variables;
  for (const auto& sc : plan.scenarios) {
    report.scenario_labels.push_back(sc.label);
    report.subjective_probs.push_back(sc.subjective_prob);
  }
  report.delta_grid = plan.delta_grid;
  report.refit_mode = plan.refit_mode;
  report.master_seed = plan.master_seed;
  report.M = plan.M;
  report.R = plan.R;
  report.n = in.n;
  report.n_t = static_cast<Eigen::Index>(in.respondent_ids.size());
  report.n0 = in.n0();
  report.n_max = n_max;

  // Truths are shared by every delta.
  std::vector<std::vector<Matrix>> truths(S);
  std::vector<std::vector<ColumnSummary>> truth_summaries(S);
  for (std::size_t s = 0; s < S; ++s) {
    truths[s] = generate_true_datasets(root.child({detail::kTruthStream, s}), in, plan.scenarios[s].pi_star, plan.M);
    for (const auto& t : truths[s]) truth_summaries[s].push_back(ColumnSummary::of(detail::to_original(t, in.transform)));
  }

  const std::size_t units = S * plan.M * G;
  std::vector<std::vector<ReplicateResult>> unit_results(units);
  std::atomic<std::size_t> done{0};
  auto run_unit = [&](std::size_t u) {
    const std::size_t s = u / (plan.M * G);
    const std::size_t j = (u / G) % plan.M;
    const std::size_t d = u % G;
    const double delta = plan.delta_grid[d];
    if (progress) progress({ProgressEvent::Kind::Started, s, j, d, done.load(), units});

    const Matrix& truth = truths[s][j];
    const std::uint64_t dk = delta_key(delta);
    Rng follow_rng = root.child({detail::kFollowupStream, s, j, dk}).make_rng();
    const auto positions = draw_followup_sample(follow_rng, in.n0(), delta, n_max);
    std::vector<Eigen::Index> sampled_ids;
    Matrix y_f(static_cast<Eigen::Index>(positions.size()), in.p());
    for (std::size_t a = 0; a < positions.size(); ++a) {
      const Eigen::Index id = in.nonrespondent_ids[static_cast<std::size_t>(positions[a])];
      sampled_ids.push_back(id);
      y_f.row(static_cast<Eigen::Index>(a)) = truth.row(id);
    }
    const double cost = cost_measure(plan.cost, sampled_ids);

    std::optional<RefitResult> refit;
    if (static_cast<Eigen::Index>(positions.size()) < in.n0()) {
      Rng refit_rng = root.child({detail::kRefitStream, s, j, dk}).make_rng();
      refit = refit_model(refit_rng, in.y_t, y_f, plan.refit_mode, plan.min_rows_per_dim, in.hp, plan.refit_chain);
    }
    const ReplicateKey base{s, j, d, 0};
    const auto completions = generate_completed_datasets(root.child({detail::kImputeStream, s, j, dk}), in, truth,
                                                         positions, refit ? &*refit : nullptr, plan.R, base);
    std::vector<ReplicateResult> results;
    for (const auto& c : completions) {
      if (sink) sink(c);
      ReplicateResult r;
      r.key = c.key;
      const auto comp_summary = ColumnSummary::of(detail::to_original(c.rows, in.transform));
      r.theta = theta_replicate(truth_summaries[s][j], comp_summary);
      r.tau = tau_replicate(truth_summaries[s][j], comp_summary);
      const auto fit = propensity_fit(truth, c.rows, plan.propensity);
      r.rho = rho_replicate(fit.fitted);
      r.propensity_converged = fit.converged;
      r.cost = cost;
      results.push_back(std::move(r));
    }
    unit_results[u] = std::move(results);
    const std::size_t finished = ++done;
    if (progress) progress({ProgressEvent::Kind::Finished, s, j, d, finished, units});
  };
  const auto errors = detail::parallel_for(units, plan.threads, run_unit);

  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t d = 0; d < G; ++d) {
      CellResult cell;
      cell.scenario = s;
      cell.delta_index = d;
      cell.delta = plan.delta_grid[d];
      cell.n_f = std::min(followup_size(cell.delta, n_max), in.n0());
      for (std::size_t j = 0; j < plan.M; ++j) {
        const std::size_t u = (s * plan.M + j) * G + d;
        if (errors[u]) {
          report.failures.push_back({ReplicateKey{s, j, d, 0}, detail::describe(errors[u])});
          continue;
        }
        for (auto& r : unit_results[u]) cell.replicates.push_back(std::move(r));
      }
      std::vector<Vector> th, ta;
      std::vector<double> rh;
      double cost_sum = 0.0;
      for (const auto& r : cell.replicates) {
        th.push_back(r.theta);
        ta.push_back(r.tau);
        rh.push_back(r.rho);
        cost_sum += r.cost;
      }
      cell.theta = theta_measure(th);
      cell.tau = tau_measure(ta);
      cell.rho = rho_measure(rh);
      cell.cost = cell.replicates.empty() ? 0.0 : cost_sum / static_cast<double>(cell.replicates.size());
      report.cells.push_back(std::move(cell));
    }
  }

  if (!plan.scenarios.empty() && plan.scenarios.front().subjective_prob) {
    std::vector<double> p;
    for (const auto& sc : plan.scenarios) p.push_back(*sc.subjective_prob);
    for (std::size_t d = 0; d < G; ++d) {
      std::vector<double> th(S), ta(S), rh(S), co(S);
      for (std::size_t s = 0; s < S; ++s) {
        const auto& c = report.cell(s, d);
        th[s] = c.theta.aggregate;
        ta[s] = c.tau.aggregate;
        rh[s] = c.rho;
        co[s] = c.cost;
      }
      report.expected.push_back({plan.delta_grid[d], expected_over_scenarios(th, p), expected_over_scenarios(ta, p),
                                 expected_over_scenarios(rh, p), expected_over_scenarios(co, p)});
    }
  }
  return report;
}

}  // namespace nrfu
