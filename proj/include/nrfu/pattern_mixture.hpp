#pragma once

// Pattern-mixture imputation for unit nonrespondents: keep the MAP component
// locations and scales, replace the mixture probabilities.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nrfu/mixture.hpp"

namespace nrfu {

/// One per-component adjustment. A multiplier scales the base probability;
/// an override replaces the raw (pre-renormalization) weight.
struct Tilt {
  enum class Kind { Multiplier, Override };
  Kind kind = Kind::Multiplier;
  double value = 1.0;

  static Tilt multiplier(double m) { return {Kind::Multiplier, m}; }
  static Tilt override_weight(double w) { return {Kind::Override, w}; }
  [[nodiscard]] bool is_identity() const { return kind == Kind::Multiplier && value == 1.0; }
  friend bool operator==(const Tilt&, const Tilt&) = default;
};

inline Vector zero_empty_components(const Vector& pi, const std::vector<bool>& occupied) {
  if (static_cast<Eigen::Index>(occupied.size()) != pi.size()) {
    throw Error(ErrorCode::DimensionMismatch, "one occupancy flag per component is required");
  }
  Vector out = pi;
  for (Eigen::Index k = 0; k < pi.size(); ++k)
    if (!occupied[static_cast<std::size_t>(k)]) out(k) = 0.0;
  const double total = out.sum();
  if (!(total > 0.0)) throw Error(ErrorCode::AllComponentsEmpty, "no occupied component carries probability");
  return out / total;
}

inline Vector tilt_and_renorm(const Vector& base, const std::vector<Tilt>& tilts) {
  if (static_cast<Eigen::Index>(tilts.size()) != base.size()) {
    throw Error(ErrorCode::DimensionMismatch, "one tilt entry per component is required");
  }
  Vector raw(base.size());
  for (Eigen::Index k = 0; k < base.size(); ++k) {
    const Tilt& t = tilts[static_cast<std::size_t>(k)];
    if (!(t.value >= 0.0) || !std::isfinite(t.value)) {
      throw Error(ErrorCode::ValidationError, "tilt values must be finite and non-negative");
    }
    raw(k) = t.kind == Tilt::Kind::Multiplier ? base(k) * t.value : t.value;
  }
  const double total = raw.sum();
  if (!(total > 0.0)) throw Error(ErrorCode::AllZeroAfterTilt, "every component has zero weight after tilting");
  return raw / total;
}

struct Scenario {
  std::string label;
  std::vector<Tilt> tilts;
  Vector pi_star;
  std::optional<double> subjective_prob;

  [[nodiscard]] std::size_t adjusted_count() const {
    return static_cast<std::size_t>(std::count_if(tilts.begin(), tilts.end(), [](const Tilt& t) { return !t.is_identity(); }));
  }
};

/// Builds a scenario against a MAP estimate: empty components are zeroed
/// before and after the tilts are applied.
inline Scenario make_scenario(std::string label, std::vector<Tilt> tilts, const MapEstimate& map,
                              std::optional<double> subjective_prob = std::nullopt) {
  if (subjective_prob && !(*subjective_prob >= 0.0 && *subjective_prob <= 1.0)) {
    throw Error(ErrorCode::ValidationError, "subjective probability must lie in [0, 1]");
  }
  const Vector base = zero_empty_components(map.pi, map.occupied);
  Vector pi_star = tilt_and_renorm(base, tilts);
  for (std::size_t k = 0; k < map.K(); ++k)
    if (!map.occupied[k]) pi_star(static_cast<Eigen::Index>(k)) = 0.0;
  const double total = pi_star.sum();
  if (!(total > 0.0)) throw Error(ErrorCode::AllZeroAfterTilt, "only empty components received weight");
  return {std::move(label), std::move(tilts), pi_star / total, subjective_prob};
}

inline Scenario build_mar_scenario(const MapEstimate& map) {
  return make_scenario("MAR", std::vector<Tilt>(map.K(), Tilt::multiplier(1.0)), map);
}

/// Tilt addressed by component index or by delta rank among occupied
/// components; resolved against a MAP estimate.
struct TiltSpec {
  enum class Target { Component, RankFromBottom, RankFromTop };
  Target target = Target::Component;
  std::size_t index = 1;  ///< 1-based
  Tilt tilt;
};

inline std::vector<Tilt> resolve_tilts(const std::vector<TiltSpec>& specs, const MapEstimate& map) {
  std::vector<Tilt> tilts(map.K(), Tilt::multiplier(1.0));
  const auto ranked = map.occupied_by_rank();
  for (const auto& spec : specs) {
    if (spec.index < 1) throw Error(ErrorCode::ValidationError, "tilt indices are 1-based");
    std::size_t k = 0;
    switch (spec.target) {
      case TiltSpec::Target::Component:
        if (spec.index > map.K()) throw Error(ErrorCode::ValidationError, "component index out of range");
        k = spec.index - 1;
        break;
      case TiltSpec::Target::RankFromBottom:
        if (spec.index > ranked.size()) continue;
        k = ranked[spec.index - 1];
        break;
      case TiltSpec::Target::RankFromTop:
        if (spec.index > ranked.size()) continue;
        k = ranked[ranked.size() - spec.index];
        break;
    }
    tilts[k] = spec.tilt;
  }
  return tilts;
}

struct ImputedRows {
  Matrix rows;                ///< n0 x p, model scale
  std::vector<int> component; ///< component drawn for each row
};

/// z ~ Multinomial(pi_star), y ~ N(mu_z, Sigma_z), independently per row.
inline ImputedRows impute_unit_nonrespondents(Rng& rng, const MapEstimate& map, const Vector& pi_star,
                                              Eigen::Index count) {
  if (pi_star.size() != static_cast<Eigen::Index>(map.K())) {
    throw Error(ErrorCode::DimensionMismatch, "pi_star does not match the MAP estimate");
  }
  ImputedRows out;
  out.rows.resize(count, map.dim());
  out.component.resize(static_cast<std::size_t>(count));
  for (Eigen::Index i = 0; i < count; ++i) {
    const auto k = categorical_sample(rng, pi_star);
    out.component[static_cast<std::size_t>(i)] = static_cast<int>(k);
    out.rows.row(i) = mvn_sample(rng, map.mu.row(static_cast<Eigen::Index>(k)).transpose(), map.sigma[k]).transpose();
  }
  return out;
}

inline ImputedRows impute_unit_nonrespondents(Rng& rng, const MapEstimate& map, const Scenario& scenario,
                                              Eigen::Index count) {
  return impute_unit_nonrespondents(rng, map, scenario.pi_star, count);
}

}  // namespace nrfu
