#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "untangle/common.hpp"
#include "untangle/dag.hpp"

namespace untangle {

struct GaussianNoise {
  double mean = 0.0;
  double variance = 1.0;
};

enum class MechanismKind { Linear, Quadratic };

/// Structural equation of one node: s(U_pa) + ε with
///   s(u) = Σ_i w_i u_i + Σ_i q_i u_i² + Σ_(i,l) c_il u_i u_l + intercept.
/// Quadratic and cross weights are keyed by parent index; a Linear mechanism
/// carries none of them.
struct Mechanism {
  MechanismKind kind = MechanismKind::Linear;
  std::map<int, double> linear_weights;
  std::map<int, double> quadratic_weights;
  std::map<std::pair<int, int>, double> cross_weights;
  double intercept = 0.0;
  GaussianNoise noise;

  double structural(const RowVector& u) const {
    double s = intercept;
    for (const auto& [i, w] : linear_weights) s += w * u(i);
    if (kind == MechanismKind::Quadratic) {
      for (const auto& [i, q] : quadratic_weights) s += q * u(i) * u(i);
      for (const auto& [il, c] : cross_weights) s += c * u(il.first) * u(il.second);
    }
    return s;
  }
};

enum class InterventionKind { Do, Shift, NoiseScale, NoiseShift };

/// Single-node intervention. Do replaces the node value, Shift adds to the
/// structural equation, NoiseScale multiplies the noise std by sqrt(factor),
/// NoiseShift moves the noise mean.
struct Intervention {
  int target = 0;
  InterventionKind kind = InterventionKind::Shift;
  double value = 0.0;  // Do value, Shift a, NoiseScale factor, or NoiseShift delta.

  static Intervention do_value(int target, double v) { return {target, InterventionKind::Do, v}; }
  static Intervention shift(int target, double a) {
    require(a != 0.0, "Intervention: Shift requires a != 0");
    return {target, InterventionKind::Shift, a};
  }
  static Intervention noise_scale(int target, double factor) {
    require(factor > 0.0 && factor != 1.0, "Intervention: NoiseScale factor must be > 0 and != 1");
    return {target, InterventionKind::NoiseScale, factor};
  }
  static Intervention noise_shift(int target, double delta) {
    return {target, InterventionKind::NoiseShift, delta};
  }
};

struct EnvironmentTag {
  // -1: observational, k >= 0: index of the registered intervention.
  int intervention_index = -1;
  bool observational() const { return intervention_index < 0; }
};

struct LatentSample {
  Matrix values;  // N x p
  EnvironmentTag tag;
};

/// Latent structural causal model: DAG, one mechanism per node, a base seed,
/// and a registry of the single-node interventions available for this model.
/// Immutable after construction; sampling derives a fresh deterministic RNG
/// stream from (seed, environment).
class Scm {
 public:
  Scm(Dag dag, std::vector<Mechanism> mechanisms, std::uint64_t seed)
      : dag_(std::move(dag)), mechanisms_(std::move(mechanisms)), seed_(seed) {
    require(static_cast<int>(mechanisms_.size()) == dag_.num_nodes(),
            "Scm: one mechanism per node required");
    for (int j = 0; j < dag_.num_nodes(); ++j) {
      require(mechanisms_[j].noise.variance > 0.0, "Scm: noise variance must be positive");
      auto pa = dag_.parents(j);
      std::set<int> pa_set(pa.begin(), pa.end());
      for (const auto& [i, w] : mechanisms_[j].linear_weights)
        require(pa_set.count(i) > 0, "Scm: mechanism references a non-parent node");
      for (const auto& [i, q] : mechanisms_[j].quadratic_weights)
        require(pa_set.count(i) > 0, "Scm: quadratic weight on a non-parent node");
      for (const auto& [il, c] : mechanisms_[j].cross_weights)
        require(pa_set.count(il.first) > 0 && pa_set.count(il.second) > 0,
                "Scm: cross weight on a non-parent node");
    }
  }

  const Dag& dag() const { return dag_; }
  const std::vector<Mechanism>& mechanisms() const { return mechanisms_; }
  const Mechanism& mechanism(int j) const { return mechanisms_[j]; }
  std::uint64_t seed() const { return seed_; }

  void register_intervention(const Intervention& iv) {
    require(iv.target >= 0 && iv.target < dag_.num_nodes(), "Scm: intervention target out of range");
    interventions_.push_back(iv);
  }
  const std::vector<Intervention>& interventions() const { return interventions_; }

  bool all_linear() const {
    for (const auto& m : mechanisms_)
      if (m.kind != MechanismKind::Linear) return false;
    return true;
  }

 private:
  Dag dag_;
  std::vector<Mechanism> mechanisms_;
  std::uint64_t seed_;
  std::vector<Intervention> interventions_;
};

namespace detail {

inline void check_disjoint_targets(const std::vector<Intervention>& ivs) {
  std::set<int> targets;
  for (const auto& iv : ivs) {
    require(targets.insert(iv.target).second, "sample: duplicate intervention targets");
  }
}

}  // namespace detail

/// Ancestral sampling in topological order under an intervention set with
/// pairwise distinct targets. env_stream selects the deterministic RNG
/// stream; pass the environment index so parallel per-environment sampling
/// is reproducible.
inline LatentSample sample(const Scm& scm, const std::vector<Intervention>& intervention_set,
                           std::int64_t n, std::uint64_t env_stream = 0) {
  require(n >= 1, "sample: n must be >= 1");
  detail::check_disjoint_targets(intervention_set);
  int p = scm.dag().num_nodes();
  std::vector<const Intervention*> by_target(p, nullptr);
  for (const auto& iv : intervention_set) {
    require(iv.target >= 0 && iv.target < p, "sample: target out of range");
    by_target[iv.target] = &iv;
  }

  auto rng = make_rng(scm.seed(), env_stream);
  std::normal_distribution<double> std_normal(0.0, 1.0);
  const auto& order = scm.dag().topological_order();

  Matrix values(n, p);
  RowVector row(p);
  for (std::int64_t s = 0; s < n; ++s) {
    for (int j : order) {
      const Mechanism& m = scm.mechanism(j);
      double noise_mean = m.noise.mean;
      double noise_std = std::sqrt(m.noise.variance);
      double shift = 0.0;
      const Intervention* iv = by_target[j];
      if (iv != nullptr) {
        switch (iv->kind) {
          case InterventionKind::Do:
            row(j) = iv->value;
            values(s, j) = row(j);
            continue;
          case InterventionKind::Shift:
            shift = iv->value;
            break;
          case InterventionKind::NoiseScale:
            noise_std *= std::sqrt(iv->value);
            break;
          case InterventionKind::NoiseShift:
            noise_mean += iv->value;
            break;
        }
      }
      double eps = noise_mean + noise_std * std_normal(rng);
      double v = m.structural(row) + shift + eps;
      if (!std::isfinite(v))
        throw std::runtime_error("sample: non-finite mechanism output at node " + std::to_string(j));
      row(j) = v;
      values(s, j) = v;
    }
  }
  return LatentSample{std::move(values), EnvironmentTag{}};
}

inline LatentSample sample_environment(const Scm& scm, int intervention_index, std::int64_t n) {
  if (intervention_index < 0) {
    auto out = sample(scm, {}, n, 0);
    out.tag = EnvironmentTag{-1};
    return out;
  }
  require(intervention_index < static_cast<int>(scm.interventions().size()),
          "sample_environment: intervention index out of range");
  auto out = sample(scm, {scm.interventions()[intervention_index]}, n,
                    static_cast<std::uint64_t>(intervention_index) + 1);
  out.tag = EnvironmentTag{intervention_index};
  return out;
}

struct Moments {
  RowVector mean;
  Matrix covariance;
};

/// Closed-form mean and covariance for linear-Gaussian models, used as a
/// test oracle. mean = (noise means + shifts + intercepts)(I−W)⁻¹ and
/// covariance = Tᵀ D T with T = (I−W)⁻¹. A Do intervention zeroes the
/// target's incoming weights and noise and pins the intercept at the value.
inline Moments analytic_moments(const Scm& scm, const std::vector<Intervention>& intervention_set) {
  require(scm.all_linear(), "analytic_moments: unsupported for quadratic mechanisms");
  detail::check_disjoint_targets(intervention_set);
  int p = scm.dag().num_nodes();
  std::vector<const Intervention*> by_target(p, nullptr);
  for (const auto& iv : intervention_set) by_target[iv.target] = &iv;

  Matrix W = Matrix::Zero(p, p);  // W(i, j) = weight of parent i in node j
  RowVector offset(p);
  Vector noise_var(p);
  for (int j = 0; j < p; ++j) {
    const Mechanism& m = scm.mechanism(j);
    double b = m.intercept + m.noise.mean;
    double v = m.noise.variance;
    bool keep_weights = true;
    const Intervention* iv = by_target[j];
    if (iv != nullptr) {
      switch (iv->kind) {
        case InterventionKind::Do:
          b = iv->value;
          v = 0.0;
          keep_weights = false;
          break;
        case InterventionKind::Shift:
          b += iv->value;
          break;
        case InterventionKind::NoiseScale:
          v *= iv->value;
          break;
        case InterventionKind::NoiseShift:
          b += iv->value;
          break;
      }
    }
    if (keep_weights)
      for (const auto& [i, w] : m.linear_weights) W(i, j) = w;
    offset(j) = b;
    noise_var(j) = v;
  }

  // U = z T with z = offset + noise, T = (I-W)^{-1}.
  Matrix T = (Matrix::Identity(p, p) - W).inverse();
  Moments out;
  out.mean = offset * T;
  out.covariance = T.transpose() * noise_var.asDiagonal() * T;
  return out;
}

/// Combines registered single-node interventions into one multi-target set
/// following the product rule: intervened nodes take their single-node
/// mechanism, all others keep the observational one. Overlapping targets are
/// allowed for Shift only, in which case the shift values add up.
inline std::vector<Intervention> compose_interventions(const Scm& scm,
                                                       const std::vector<int>& chosen) {
  std::map<int, Intervention> merged;
  for (int k : chosen) {
    require(k >= 0 && k < static_cast<int>(scm.interventions().size()),
            "compose_interventions: unknown intervention index");
    const Intervention& iv = scm.interventions()[k];
    auto it = merged.find(iv.target);
    if (it == merged.end()) {
      merged.emplace(iv.target, iv);
    } else {
      require(it->second.kind == InterventionKind::Shift && iv.kind == InterventionKind::Shift,
              "compose_interventions: overlapping targets are only supported for Shift");
      it->second.value += iv.value;
    }
  }
  std::vector<Intervention> out;
  for (const auto& [t, iv] : merged) out.push_back(iv);
  return out;
}

struct FaithfulnessRow {
  int child = -1;        // maximal child j, or -1 for the target's own moment check
  int condition = 0;     // 1 or 2, per the moment-condition cases
  int moment_order = 0;  // discriminating m (0 if none found)
  double c_j = 0.0;      // cancellation constant, condition 2 only
  bool passed = false;
};

struct FaithfulnessReport {
  bool passed = false;
  int condition = 0;
  std::vector<FaithfulnessRow> rows;
};

struct FaithfulnessOptions {
  std::int64_t samples = 100000;
  double rel_tol = 0.05;
  int max_moment = 4;
};

namespace detail {

inline double empirical_moment(const Vector& v, int m) {
  double s = 0.0;
  for (std::int64_t i = 0; i < v.size(); ++i) s += std::pow(v(i), m);
  return s / static_cast<double>(v.size());
}

inline bool rel_changed(double a, double b, double tol) {
  double scale = std::max({std::abs(a), std::abs(b), 1.0});
  return std::abs(a - b) / scale > tol;
}

}  // namespace detail

/// Monte-Carlo check of the finite-moment faithfulness conditions for one
/// registered intervention: condition (1) when the target's mean is
/// unchanged (variance-type interventions), condition (2) when it moves
/// (mean-type interventions, with the cancellation constant c_j). Linear
/// models with mean interventions fail here by design: the child's shift is
/// linearly cancellable.
inline FaithfulnessReport check_linear_faithfulness(const Scm& scm, int intervention_index,
                                                    const FaithfulnessOptions& opts = {}) {
  require(intervention_index >= 0 &&
              intervention_index < static_cast<int>(scm.interventions().size()),
          "check_linear_faithfulness: intervention not registered");
  const Intervention& iv = scm.interventions()[intervention_index];
  int target = iv.target;

  LatentSample obs = sample(scm, {}, opts.samples, 1000);
  LatentSample inter = sample(scm, {iv}, opts.samples, 2000 + intervention_index);
  if (!obs.values.allFinite() || !inter.values.allFinite())
    throw std::runtime_error("check_linear_faithfulness: non-finite moment estimates");

  Vector u_obs = obs.values.col(target);
  Vector u_int = inter.values.col(target);
  double mean_obs = u_obs.mean();
  double mean_int = u_int.mean();
  double sd = std::sqrt((u_obs.array() - mean_obs).square().mean());
  bool mean_changed = std::abs(mean_obs - mean_int) > opts.rel_tol * std::max(sd, 1e-12);

  FaithfulnessReport report;
  auto mch = scm.dag().maximal_children(target);

  if (!mean_changed) {
    report.condition = 1;
    // Smallest m > 1 whose unconditional moment moves. For additive noise the
    // conditional m-th moment changes exactly when some noise moment of order
    // <= m changes, so the unconditional scan is the operative test.
    FaithfulnessRow own;
    own.child = -1;
    own.condition = 1;
    for (int m = 2; m <= opts.max_moment; ++m) {
      if (detail::rel_changed(detail::empirical_moment(u_obs, m),
                              detail::empirical_moment(u_int, m), opts.rel_tol)) {
        own.moment_order = m;
        own.passed = true;
        break;
      }
    }
    report.rows.push_back(own);
    bool all = own.passed;
    for (int j : mch) {
      FaithfulnessRow row;
      row.child = j;
      row.condition = 1;
      row.moment_order = 1;
      row.passed = detail::rel_changed(obs.values.col(j).mean(), inter.values.col(j).mean(),
                                       opts.rel_tol);
      report.rows.push_back(row);
      all = all && row.passed;
    }
    report.passed = all;
    return report;
  }

  report.condition = 2;
  bool all = true;
  for (int j : mch) {
    FaithfulnessRow row;
    row.child = j;
    row.condition = 2;
    double dj = obs.values.col(j).mean() - inter.values.col(j).mean();
    double di = mean_obs - mean_int;
    row.c_j = -dj / di;
    Vector v_obs = obs.values.col(j) + row.c_j * u_obs;
    Vector v_int = inter.values.col(j) + row.c_j * u_int;
    for (int m = 2; m <= opts.max_moment; ++m) {
      if (detail::rel_changed(detail::empirical_moment(v_obs, m),
                              detail::empirical_moment(v_int, m), opts.rel_tol)) {
        row.moment_order = m;
        row.passed = true;
        break;
      }
    }
    report.rows.push_back(row);
    all = all && row.passed;
  }
  report.passed = all;  // vacuously true with no children
  return report;
}

struct RandomModelOptions {
  MechanismKind kind = MechanismKind::Quadratic;
  double edge_prob = 0.5;
  // Weights stay away from degenerate (unfaithful) parameter sets.
  double linear_lo = 0.5, linear_hi = 1.5;
  double quad_lo = 0.3, quad_hi = 1.0;
  double intercept_range = 0.5;
};

/// Random SCM with edge weights uniform in ±[linear_lo, linear_hi] and, for
/// quadratic mechanisms, quadratic coefficients in ±[quad_lo, quad_hi].
inline Scm random_scm(int p, const RandomModelOptions& opts, std::uint64_t seed) {
  Dag dag = random_dag(p, opts.edge_prob, seed);
  auto rng = make_rng(seed, 31);
  std::uniform_real_distribution<double> lin(opts.linear_lo, opts.linear_hi);
  std::uniform_real_distribution<double> quad(opts.quad_lo, opts.quad_hi);
  std::uniform_real_distribution<double> inter(-opts.intercept_range, opts.intercept_range);
  std::bernoulli_distribution sign(0.5);
  std::vector<Mechanism> mechanisms(p);
  for (int j = 0; j < p; ++j) {
    Mechanism& m = mechanisms[j];
    m.kind = opts.kind;
    m.intercept = inter(rng);
    m.noise = GaussianNoise{0.0, 1.0};
    for (int i : dag.parents(j)) {
      m.linear_weights[i] = (sign(rng) ? 1.0 : -1.0) * lin(rng);
      if (opts.kind == MechanismKind::Quadratic)
        m.quadratic_weights[i] = (sign(rng) ? 1.0 : -1.0) * quad(rng);
    }
  }
  return Scm(std::move(dag), std::move(mechanisms), seed);
}

}  // namespace untangle
