#pragma once

/**
 * @file
 * @brief Closed-loop experiments: reference generators, the measure/adapt/solve/apply loop, metrics,
 * trace files, paired nominal/adaptive sweeps and timing statistics.
 */

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <thread>

#include "adapt.hpp"
#include "csv.hpp"
#include "dynamics.hpp"
#include "json_util.hpp"
#include "koopman.hpp"
#include "mpc.hpp"
#include "random.hpp"

namespace akmpc {

// ---------------------------------------------------------------------------------------------
// Channel conventions
// ---------------------------------------------------------------------------------------------

/// Tracked position-like channels: pendulum angles, joint angles, quadrotor (y, z).
inline std::vector<int> angle_channels(SystemId s, int n)
{
  std::vector<int> c;
  switch (s) {
    case SystemId::pendulum:
      for (int i = 0; i < n; i += 2) { c.push_back(i); }
      break;
    case SystemId::manipulator: c = {0, 1, 2}; break;
    case SystemId::quadrotor: c = {0, 1}; break;
  }
  return c;
}

/// Matching rate channels.
inline std::vector<int> rate_channels(SystemId s, int n)
{
  std::vector<int> c;
  switch (s) {
    case SystemId::pendulum:
      for (int i = 1; i < n; i += 2) { c.push_back(i); }
      break;
    case SystemId::manipulator: c = {3, 4, 5}; break;
    case SystemId::quadrotor: c = {3, 4}; break;
  }
  return c;
}

// ---------------------------------------------------------------------------------------------
// References
// ---------------------------------------------------------------------------------------------

struct ReferenceSpec
{
  enum class Kind { constant_velocity, sinusoid_joints, path_shape };
  Kind kind = Kind::constant_velocity;

  double velocity = 40.0;  ///< constant_velocity: rad/s for every angle channel

  Vector amplitude = Vector::Constant(1, 1.0);  ///< sinusoid_joints: one entry per joint or a single broadcast value
  Vector omega     = Vector::Constant(1, 1.0);  ///< rad/s

  std::string shape = "lemniscate";  ///< lemniscate | s-shape | hypotrochoid
  double scale      = 2.0;           ///< m, half-width of the curve
  double period     = 10.0;          ///< s per traversal
  Vector center     = Vector::Zero(2);

  void validate() const
  {
    if (kind == Kind::path_shape) {
      if (shape != "lemniscate" && shape != "s-shape" && shape != "hypotrochoid") {
        throw ConfigError("reference: unknown shape '" + shape + "'");
      }
      if (!(scale > 0 && period > 0) || center.size() != 2) { throw ConfigError("reference: bad path parameters"); }
    }
    if (kind == Kind::sinusoid_joints && (amplitude.size() == 0 || omega.size() == 0)) {
      throw ConfigError("reference: sinusoid needs amplitude and omega");
    }
  }
};

inline std::string to_string(ReferenceSpec::Kind k)
{
  switch (k) {
    case ReferenceSpec::Kind::constant_velocity: return "constant_velocity";
    case ReferenceSpec::Kind::sinusoid_joints: return "sinusoid_joints";
    case ReferenceSpec::Kind::path_shape: return "path_shape";
  }
  return "constant_velocity";
}

inline ReferenceSpec::Kind reference_kind_from_string(const std::string & s)
{
  if (s == "constant_velocity") { return ReferenceSpec::Kind::constant_velocity; }
  if (s == "sinusoid_joints") { return ReferenceSpec::Kind::sinusoid_joints; }
  if (s == "path_shape") { return ReferenceSpec::Kind::path_shape; }
  throw ConfigError("reference: unknown kind '" + s + "'");
}

/**
 * @brief Planar curve point at time t.
 *
 * lemniscate (Bernoulli):  (a cos s, a sin s cos s) / (1 + sin^2 s), starts at (a, 0)
 * s-shape:                 two arcs y = a w, z = (a/2) sin(pi w) with w = sin s, starts at (0, 0)
 * hypotrochoid R=5, r=3, d=5 scaled to radius a, three loops per period, starts at (a, 0)
 * with s = 2 pi t / period, shifted by `center`.
 */
inline Eigen::Vector2d path_point(const ReferenceSpec & r, double t)
{
  const double s = 2 * std::numbers::pi * t / r.period;
  const double a = r.scale;
  Eigen::Vector2d p;
  if (r.shape == "lemniscate") {
    const double den = 1 + std::sin(s) * std::sin(s);
    p << a * std::cos(s) / den, a * std::sin(s) * std::cos(s) / den;
  } else if (r.shape == "s-shape") {
    const double w = std::sin(s);
    p << a * w, 0.5 * a * std::sin(std::numbers::pi * w);
  } else if (r.shape == "hypotrochoid") {
    constexpr double R = 5, rr = 3, d = 5;
    const double th = 3 * s;  // the curve closes after three turns of the rolling circle
    p << (R - rr) * std::cos(th) + d * std::cos((R - rr) / rr * th), (R - rr) * std::sin(th) - d * std::sin((R - rr) / rr * th);
    p *= a / (R - rr + d);
  } else {
    throw ConfigError("reference: unknown shape '" + r.shape + "'");
  }
  return p + Eigen::Vector2d(r.center(0), r.center(1));
}

/// Full-state reference at time t. `x0` supplies theta_i(0) for the constant-velocity kind.
inline Vector reference_at(const ReferenceSpec & r, double t, SystemId sys, int n, const Vector & x0)
{
  if (t < 0) { throw ConfigError("reference_at: t must be >= 0"); }
  Vector x      = Vector::Zero(n);
  const auto ac = angle_channels(sys, n);
  const auto rc = rate_channels(sys, n);
  switch (r.kind) {
    case ReferenceSpec::Kind::constant_velocity:
      for (std::size_t i = 0; i < ac.size(); ++i) {
        x(ac[i]) = (x0.size() == n ? x0(ac[i]) : 0.0) + r.velocity * t;
        x(rc[i]) = r.velocity;
      }
      break;
    case ReferenceSpec::Kind::sinusoid_joints:
      for (std::size_t i = 0; i < ac.size(); ++i) {
        const double A = r.amplitude.size() == 1 ? r.amplitude(0) : r.amplitude(Eigen::Index(i));
        const double w = r.omega.size() == 1 ? r.omega(0) : r.omega(Eigen::Index(i));
        x(ac[i])       = A * std::sin(w * t);
        x(rc[i])       = A * w * std::cos(w * t);
      }
      break;
    case ReferenceSpec::Kind::path_shape: {
      if (sys != SystemId::quadrotor) { throw ConfigError("reference: path shapes need the quadrotor"); }
      const double h = 1e-5;
      const Eigen::Vector2d p  = path_point(r, t);
      const Eigen::Vector2d v  = (path_point(r, t + h) - path_point(r, std::max(t - h, 0.0))) / (t + h - std::max(t - h, 0.0));
      x(0) = p(0);
      x(1) = p(1);
      x(3) = v(0);
      x(4) = v(1);
      break;
    }
  }
  return x;
}

inline ReferenceSpec reference_from_json(const Json & j, ReferenceSpec r = {})
{
  check_keys(j, {"kind", "velocity", "amplitude", "omega", "shape", "scale", "period", "center"}, "reference");
  if (j.contains("kind")) { r.kind = reference_kind_from_string(j.at("kind").get<std::string>()); }
  r.velocity  = get_or(j, "velocity", r.velocity);
  r.amplitude = vector_or(j, "amplitude", r.amplitude);
  r.omega     = vector_or(j, "omega", r.omega);
  r.shape     = get_or(j, "shape", r.shape);
  r.scale     = get_or(j, "scale", r.scale);
  r.period    = get_or(j, "period", r.period);
  r.center    = vector_or(j, "center", r.center);
  r.validate();
  return r;
}

inline Json reference_to_json(const ReferenceSpec & r)
{
  return {{"kind", to_string(r.kind)},
          {"velocity", r.velocity},
          {"amplitude", to_std_vector(r.amplitude)},
          {"omega", to_std_vector(r.omega)},
          {"shape", r.shape},
          {"scale", r.scale},
          {"period", r.period},
          {"center", to_std_vector(r.center)}};
}

// ---------------------------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------------------------

enum class RunMode { nominal, adaptive };

inline std::string to_string(RunMode m) { return m == RunMode::nominal ? "nominal" : "adaptive"; }

inline RunMode run_mode_from_string(const std::string & s)
{
  if (s == "nominal") { return RunMode::nominal; }
  if (s == "adaptive") { return RunMode::adaptive; }
  throw ConfigError("unknown mode '" + s + "'");
}

struct Uncertainty
{
  double delta_pct = 0;  ///< every listed constant scaled by (1 +- delta/100), sign from the seed
  double mass_pct  = 0;  ///< signed change of the masses (pendulum and link inertias follow)
  std::map<std::string, double> overrides;  ///< absolute values, e.g. {"m": 2.4, "I": 1.2}
};

struct WindSpec
{
  double v_w      = 0;  ///< mean speed (m/s)
  double alpha_w  = 0;  ///< direction (rad)
  double gust_std = 0;  ///< per-step Gaussian jitter on the speed (m/s)
};

struct ExperimentConfig
{
  SystemId system = SystemId::pendulum;
  std::string model_path;
  RunMode mode = RunMode::adaptive;
  Uncertainty uncertainty;
  DisturbanceSpec disturbance;
  WindSpec wind;
  double snr_db = std::numeric_limits<double>::infinity();
  ReferenceSpec reference;
  double duration = 5.0;  ///< s
  double rate     = 100;  ///< Hz
  Vector initial_state;   ///< empty: zeros, or the path start for path references
  MpcConfig mpc;
  AdaptConfig adapt;
  std::uint64_t seed      = 1;
  double divergence_guard = 1e4;
  int substeps            = 10;

  double dt() const { return 1.0 / rate; }

  long steps() const
  {
    const double s = duration * rate;
    return std::lround(s);
  }

  void validate() const
  {
    if (!(rate > 0) || !(duration >= 0)) { throw ConfigError("experiment: rate must be > 0 and duration >= 0"); }
    if (std::abs(duration * rate - double(steps())) > 1e-9 * std::max(1.0, duration * rate)) {
      throw ConfigError("experiment: duration x rate must be a whole number of steps");
    }
    if (!(divergence_guard > 0)) { throw ConfigError("experiment: divergence_guard must be > 0"); }
    if (!(std::isinf(snr_db) || std::isfinite(snr_db))) { throw ConfigError("experiment: bad snr_db"); }
    if (uncertainty.mass_pct <= -100) { throw ConfigError("experiment: mass_pct must exceed -100"); }
    if (wind.v_w < 0 || wind.gust_std < 0) { throw ConfigError("experiment: wind speeds must be >= 0"); }
    reference.validate();
    adapt.validate();
    disturbance.validate();
  }
};

/// Adaptation settings and loop defaults for each benchmark.
inline AdaptConfig default_adapt_config(SystemId s)
{
  AdaptConfig c;
  switch (s) {
    case SystemId::pendulum:
      c.window = 4;
      c.epochs = 2;
      c.beta1 = c.beta2 = c.beta3 = c.beta4 = 0.05;
      break;
    case SystemId::manipulator:
      c.window = 10;
      c.epochs = 10;
      c.beta1 = c.beta2 = 1.0;
      c.beta3 = c.beta4 = 0.01;
      c.adam.lr = 3e-2;
      break;
    case SystemId::quadrotor:
      c.window = 10;
      c.epochs = 10;
      c.beta1 = c.beta2 = c.beta3 = c.beta4 = 1.0;
      break;
  }
  return c;
}

inline MpcConfig default_mpc_config(SystemId s)
{
  MpcConfig c;
  switch (s) {
    case SystemId::pendulum:
      c.u_min = Vector::Constant(1, -0.2);
      c.u_max = Vector::Constant(1, 0.2);
      break;
    case SystemId::manipulator:
      c.u_min = Vector::Constant(3, -50);
      c.u_max = Vector::Constant(3, 50);
      c.R_u   = 1e-4 * Matrix::Identity(3, 3);
      break;
    case SystemId::quadrotor:
      c.horizon = 50;
      c.R_u     = 1e-3 * Matrix::Identity(2, 2);
      c.u_min   = Vector::Constant(2, 0);
      c.u_max   = Vector::Constant(2, 20);
      break;
  }
  return c;
}

inline ReferenceSpec default_reference(SystemId s)
{
  ReferenceSpec r;
  switch (s) {
    case SystemId::pendulum: r.kind = ReferenceSpec::Kind::constant_velocity; break;
    case SystemId::manipulator: r.kind = ReferenceSpec::Kind::sinusoid_joints; break;
    case SystemId::quadrotor: r.kind = ReferenceSpec::Kind::path_shape; break;
  }
  return r;
}

inline ExperimentConfig default_experiment(SystemId s)
{
  ExperimentConfig c;
  c.system    = s;
  c.adapt     = default_adapt_config(s);
  c.mpc       = default_mpc_config(s);
  c.reference = default_reference(s);
  c.duration  = s == SystemId::pendulum ? 5.0 : 10.0;
  if (s == SystemId::quadrotor) {
    c.wind.v_w     = 3.0;
    c.wind.alpha_w = std::numbers::pi / 4;
  }
  return c;
}

inline DisturbanceSpec disturbance_from_json(const Json & j)
{
  check_keys(j, {"kind", "c", "f"}, "disturbance");
  DisturbanceSpec d;
  const auto kind = get_or<std::string>(j, "kind", "none");
  if (kind == "none") { d.kind = DisturbanceSpec::Kind::none; }
  else if (kind == "constant") { d.kind = DisturbanceSpec::Kind::constant; }
  else if (kind == "sinusoid") { d.kind = DisturbanceSpec::Kind::sinusoid; }
  else { throw ConfigError("disturbance: unknown kind '" + kind + "'"); }
  d.c    = get_or(j, "c", d.c);
  d.freq = get_or(j, "f", d.freq);
  d.validate();
  return d;
}

inline Json disturbance_to_json(const DisturbanceSpec & d)
{
  const char * kind = d.kind == DisturbanceSpec::Kind::none ? "none" : d.kind == DisturbanceSpec::Kind::constant ? "constant" : "sinusoid";
  return {{"kind", kind}, {"c", d.c}, {"f", d.freq}};
}

/// Relative paths inside the config resolve against `base_dir`.
inline ExperimentConfig experiment_from_json(const Json & j, const std::filesystem::path & base_dir = {})
{
  check_keys(j,
             {"system", "model", "mode", "uncertainty", "disturbance", "wind", "noise", "reference", "duration", "rate",
              "initial_state", "mpc", "adapt", "seed", "divergence_guard", "substeps"},
             "experiment config");
  if (!j.contains("system")) { throw ConfigError("experiment config: missing 'system'"); }
  ExperimentConfig c = default_experiment(system_from_string(j.at("system").get<std::string>()));
  if (j.contains("model")) {
    std::filesystem::path p = j.at("model").get<std::string>();
    if (p.is_relative() && !base_dir.empty()) { p = base_dir / p; }
    c.model_path = p.string();
  }
  if (j.contains("mode")) { c.mode = run_mode_from_string(j.at("mode").get<std::string>()); }
  if (j.contains("uncertainty")) {
    const auto & u = j.at("uncertainty");
    check_keys(u, {"delta_pct", "mass_pct", "overrides"}, "uncertainty");
    c.uncertainty.delta_pct = get_or(u, "delta_pct", 0.0);
    c.uncertainty.mass_pct  = get_or(u, "mass_pct", 0.0);
    c.uncertainty.overrides = get_or(u, "overrides", std::map<std::string, double>{});
  }
  if (j.contains("disturbance")) { c.disturbance = disturbance_from_json(j.at("disturbance")); }
  if (j.contains("wind")) {
    const auto & w = j.at("wind");
    check_keys(w, {"v_w", "alpha_w", "gust_std"}, "wind");
    c.wind.v_w      = get_or(w, "v_w", c.wind.v_w);
    c.wind.alpha_w  = get_or(w, "alpha_w", c.wind.alpha_w);
    c.wind.gust_std = get_or(w, "gust_std", c.wind.gust_std);
  }
  if (j.contains("noise")) {
    check_keys(j.at("noise"), {"snr_db"}, "noise");
    c.snr_db = number_or_inf(j.at("noise"), "snr_db", c.snr_db);
  }
  if (j.contains("reference")) { c.reference = reference_from_json(j.at("reference"), c.reference); }
  c.duration      = get_or(j, "duration", c.duration);
  c.rate          = get_or(j, "rate", c.rate);
  c.initial_state = vector_or(j, "initial_state", c.initial_state);
  if (j.contains("mpc")) { c.mpc = mpc_config_from_json(j.at("mpc"), c.mpc); }
  if (j.contains("adapt")) { c.adapt = adapt_config_from_json(j.at("adapt"), c.adapt); }
  c.seed             = get_or<std::uint64_t>(j, "seed", c.seed);
  c.divergence_guard = get_or(j, "divergence_guard", c.divergence_guard);
  c.substeps         = get_or(j, "substeps", c.substeps);
  c.validate();
  return c;
}

inline Json experiment_to_json(const ExperimentConfig & c)
{
  Json j = {{"system", to_string(c.system)},
            {"model", c.model_path},
            {"mode", to_string(c.mode)},
            {"uncertainty",
             {{"delta_pct", c.uncertainty.delta_pct}, {"mass_pct", c.uncertainty.mass_pct}, {"overrides", c.uncertainty.overrides}}},
            {"disturbance", disturbance_to_json(c.disturbance)},
            {"wind", {{"v_w", c.wind.v_w}, {"alpha_w", c.wind.alpha_w}, {"gust_std", c.wind.gust_std}}},
            {"noise", {{"snr_db", number_to_json(c.snr_db)}}},
            {"reference", reference_to_json(c.reference)},
            {"duration", c.duration},
            {"rate", c.rate},
            {"mpc", mpc_config_to_json(c.mpc)},
            {"adapt", adapt_config_to_json(c.adapt)},
            {"seed", c.seed},
            {"divergence_guard", c.divergence_guard},
            {"substeps", c.substeps}};
  if (c.initial_state.size() > 0) { j["initial_state"] = to_std_vector(c.initial_state); }
  return j;
}

// ---------------------------------------------------------------------------------------------
// Plant construction
// ---------------------------------------------------------------------------------------------

/// RNG stream tags; nominal and adaptive runs with one seed draw identical realizations.
enum : std::uint64_t { kStreamPlant = 0x11, kStreamNoise = 0x22, kStreamGust = 0x33 };

namespace detail {

inline void apply_override(PendulumChainParams & p, const std::string & k, double v)
{
  if (k == "m") { p.m = v; }
  else if (k == "l") { p.l = v; }
  else if (k == "I") { p.I = v; }
  else if (k == "gamma") { p.gamma = v; }
  else if (k == "b") { p.b = v; }
  else if (k == "kappa") { p.kappa = v; }
  else if (k == "g") { p.g = v; }
  else { throw ConfigError("uncertainty: unknown pendulum parameter '" + k + "'"); }
}

inline void apply_override(ManipulatorParams & p, const std::string & k, double v)
{
  // Per-link keys: mass_1, length_2, inertia_3; plain keys set all links.
  auto set = [&](std::array<double, 3> & a, const std::string & base) {
    if (k == base) {
      a.fill(v);
      return true;
    }
    for (int i = 0; i < 3; ++i) {
      if (k == base + "_" + std::to_string(i + 1)) {
        a[std::size_t(i)] = v;
        return true;
      }
    }
    return false;
  };
  if (set(p.mass, "mass") || set(p.length, "length") || set(p.inertia, "inertia")) { return; }
  if (k == "g") {
    p.g = v;
    return;
  }
  throw ConfigError("uncertainty: unknown manipulator parameter '" + k + "'");
}

inline void apply_override(QuadrotorParams & p, const std::string & k, double v)
{
  if (k == "m") { p.m = v; }
  else if (k == "I") { p.I = v; }
  else if (k == "l_arm") { p.l_arm = v; }
  else if (k == "g") { p.g = v; }
  else if (k == "K") { p.K = v; }
  else if (k == "v_w") { p.v_w = v; }
  else if (k == "alpha_w") { p.alpha_w = v; }
  else { throw ConfigError("uncertainty: unknown quadrotor parameter '" + k + "'"); }
}

}  // namespace detail

/// True plant of an episode: nominal parameters with the configured uncertainty applied once.
inline SystemParams episode_params(const ExperimentConfig & cfg)
{
  SystemParams params = default_params(cfg.system);
  Rng rng             = substream(cfg.seed, kStreamPlant);
  std::visit(
    [&](auto & p) {
      using P = std::decay_t<decltype(p)>;
      if (cfg.uncertainty.delta_pct != 0) { p = perturb_params(p, cfg.uncertainty.delta_pct, rng); }
      const double f = 1 + cfg.uncertainty.mass_pct / 100;
      if constexpr (std::is_same_v<P, ManipulatorParams>) {
        for (int i = 0; i < 3; ++i) {
          p.mass[std::size_t(i)] *= f;
          p.inertia[std::size_t(i)] *= f;
        }
      } else if constexpr (std::is_same_v<P, PendulumChainParams>) {
        p.m *= f;
        p.I *= f;
      } else {
        p.m *= f;
      }
      if constexpr (std::is_same_v<P, QuadrotorParams>) {
        p.v_w     = cfg.wind.v_w;
        p.alpha_w = cfg.wind.alpha_w;
      }
      for (const auto & [k, v] : cfg.uncertainty.overrides) { detail::apply_override(p, k, v); }
      p.validate();
    },
    params);
  return params;
}

/// Initial state: configured, else the reference at t = 0.
inline Vector episode_initial_state(const ExperimentConfig & cfg, int n)
{
  if (cfg.initial_state.size() > 0) {
    require_size(cfg.initial_state, n, "initial_state");
    return cfg.initial_state;
  }
  return reference_at(cfg.reference, 0.0, cfg.system, n, Vector::Zero(n));
}

// ---------------------------------------------------------------------------------------------
// Traces and metrics
// ---------------------------------------------------------------------------------------------

struct Trace
{
  SystemId system = SystemId::pendulum;
  int n = 0, m = 0;
  std::vector<long> step;
  std::vector<double> t;
  Matrix x, x_obs, x_ref, u;  ///< one column per step
  std::vector<std::string> solve_status;
  std::vector<double> solve_ms, adapt_ms, dA_fro, dB_fro;

  long size() const { return long(t.size()); }
};

struct MetricsReport
{
  long steps    = 0;
  bool diverged = false;
  Vector rms;                  ///< per channel
  double rms_theta = 0;        ///< RMS over angle channels and time
  double rms_thetadot = 0;     ///< RMS over rate channels and time
  double e_theta = 0;          ///< relative average angle error
  double e_thetadot = 0;
  double mean_position_error = 0;  ///< mean Euclidean error over the angle channels
  double mean_step_ms = 0, max_step_ms = 0;
  double mean_solve_ms = 0, mean_adapt_ms = 0;
  bool real_time = true;  ///< mean step time below the loop period
  long degraded_steps = 0;
};

inline double improvement_pct(double base, double test) { return 100.0 * (base - test) / base; }

/// Average over instants and channels of |ref - x| / |ref|, skipping |ref| < 1e-3.
inline double relative_average_error(const Matrix & x, const Matrix & ref, const std::vector<int> & channels)
{
  double sum = 0;
  long count = 0;
  for (Eigen::Index k = 0; k < x.cols(); ++k) {
    for (int c : channels) {
      const double r = ref(c, k);
      if (std::abs(r) < 1e-3) { continue; }
      sum += std::abs(r - x(c, k)) / std::abs(r);
      ++count;
    }
  }
  return count ? sum / double(count) : 0.0;
}

inline MetricsReport compute_metrics(const Trace & tr, double period_ms = 10.0)
{
  MetricsReport r;
  r.steps = tr.size();
  r.rms   = Vector::Zero(tr.n);
  if (r.steps == 0) { return r; }
  const Matrix err = tr.x - tr.x_ref;
  r.rms            = (err.array().square().rowwise().mean()).sqrt();
  const auto ac = angle_channels(tr.system, tr.n), rc = rate_channels(tr.system, tr.n);
  auto rms_over = [&](const std::vector<int> & ch) {
    double s = 0;
    for (int c : ch) { s += err.row(c).squaredNorm(); }
    return std::sqrt(s / double(ch.size() * std::size_t(err.cols())));
  };
  r.rms_theta    = rms_over(ac);
  r.rms_thetadot = rms_over(rc);
  r.e_theta      = relative_average_error(tr.x, tr.x_ref, ac);
  r.e_thetadot   = relative_average_error(tr.x, tr.x_ref, rc);
  double pos     = 0;
  for (Eigen::Index k = 0; k < err.cols(); ++k) {
    double s = 0;
    for (int c : ac) { s += err(c, k) * err(c, k); }
    pos += std::sqrt(s);
  }
  r.mean_position_error = pos / double(err.cols());
  for (long k = 0; k < r.steps; ++k) {
    const double ms = tr.solve_ms[std::size_t(k)] + tr.adapt_ms[std::size_t(k)];
    r.mean_step_ms += ms;
    r.max_step_ms = std::max(r.max_step_ms, ms);
    r.mean_solve_ms += tr.solve_ms[std::size_t(k)];
    r.mean_adapt_ms += tr.adapt_ms[std::size_t(k)];
    if (tr.solve_status[std::size_t(k)] == "degraded") { ++r.degraded_steps; }
  }
  r.mean_step_ms /= double(r.steps);
  r.mean_solve_ms /= double(r.steps);
  r.mean_adapt_ms /= double(r.steps);
  r.real_time = r.mean_step_ms < period_ms;
  return r;
}

inline Json metrics_to_json(const MetricsReport & r)
{
  return {{"steps", r.steps},
          {"diverged", r.diverged},
          {"rms", to_std_vector(r.rms)},
          {"rms_theta", r.rms_theta},
          {"rms_thetadot", r.rms_thetadot},
          {"e_theta", r.e_theta},
          {"e_thetadot", r.e_thetadot},
          {"mean_position_error", r.mean_position_error},
          {"mean_step_ms", r.mean_step_ms},
          {"max_step_ms", r.max_step_ms},
          {"mean_solve_ms", r.mean_solve_ms},
          {"mean_adapt_ms", r.mean_adapt_ms},
          {"real_time", r.real_time},
          {"degraded_steps", r.degraded_steps}};
}

inline std::vector<std::string> trace_header(int n, int m)
{
  std::vector<std::string> h{"step", "t"};
  for (const char * pre : {"x_", "x_obs_", "x_ref_"}) {
    for (int i = 0; i < n; ++i) { h.push_back(pre + std::to_string(i)); }
  }
  for (int i = 0; i < m; ++i) { h.push_back("u_" + std::to_string(i)); }
  for (const char * c : {"solve_status", "solve_ms", "adapt_ms", "dA_fro", "dB_fro"}) { h.emplace_back(c); }
  return h;
}

/// The system name goes into a sidecar-free comment-less file, so it is inferred from n and m on read.
inline void write_trace(const Trace & tr, const std::filesystem::path & path)
{
  CsvWriter w(path, trace_header(tr.n, tr.m));
  for (long k = 0; k < tr.size(); ++k) {
    std::vector<std::string> row{std::to_string(tr.step[std::size_t(k)]), format_double(tr.t[std::size_t(k)])};
    for (const Matrix * M : {&tr.x, &tr.x_obs, &tr.x_ref}) {
      for (int i = 0; i < tr.n; ++i) { row.push_back(format_double((*M)(i, k))); }
    }
    for (int i = 0; i < tr.m; ++i) { row.push_back(format_double(tr.u(i, k))); }
    row.push_back(tr.solve_status[std::size_t(k)]);
    for (const auto * v : {&tr.solve_ms, &tr.adapt_ms, &tr.dA_fro, &tr.dB_fro}) {
      row.push_back(format_double((*v)[std::size_t(k)]));
    }
    w.row(row);
  }
}

inline SystemId infer_system(int n, int m)
{
  if (m == 1 && n % 2 == 0) { return SystemId::pendulum; }
  if (n == 6 && m == 3) { return SystemId::manipulator; }
  if (n == 6 && m == 2) { return SystemId::quadrotor; }
  throw SchemaError("trace: cannot infer the system from n = " + std::to_string(n) + ", m = " + std::to_string(m));
}

inline Trace read_trace(const std::filesystem::path & path)
{
  const CsvTable t = read_csv(path);
  Trace tr;
  for (const auto & h : t.header) {
    if (h.rfind("x_obs_", 0) == 0) { ++tr.n; }
    if (h.rfind("u_", 0) == 0) { ++tr.m; }
  }
  if (t.header != trace_header(tr.n, tr.m)) { throw SchemaError("trace: unexpected header in " + path.string()); }
  tr.system    = infer_system(tr.n, tr.m);
  const auto N = Eigen::Index(t.rows.size());
  tr.x.resize(tr.n, N);
  tr.x_obs.resize(tr.n, N);
  tr.x_ref.resize(tr.n, N);
  tr.u.resize(tr.m, N);
  for (Eigen::Index k = 0; k < N; ++k) {
    const auto r = std::size_t(k);
    tr.step.push_back(std::stol(t.rows[r][0]));
    tr.t.push_back(t.num(r, 1));
    std::size_t c = 2;
    for (Matrix * M : {&tr.x, &tr.x_obs, &tr.x_ref}) {
      for (int i = 0; i < tr.n; ++i) { (*M)(i, k) = t.num(r, c++); }
    }
    for (int i = 0; i < tr.m; ++i) { tr.u(i, k) = t.num(r, c++); }
    tr.solve_status.push_back(t.rows[r][c++]);
    for (auto * v : {&tr.solve_ms, &tr.adapt_ms, &tr.dA_fro, &tr.dB_fro}) { v->push_back(t.num(r, c++)); }
  }
  return tr;
}

// ---------------------------------------------------------------------------------------------
// Closed loop
// ---------------------------------------------------------------------------------------------

struct AdaptLogRow
{
  long step;
  double residual_norm, dA_fro, dB_fro, loss;
};

struct SolveLogRow
{
  long step;
  std::string status;
  int iterations;
  double prim_res, dual_res, solve_ms;
};

struct RunResult
{
  Trace trace;
  MetricsReport metrics;
  std::vector<AdaptLogRow> adapt_log;
  std::vector<SolveLogRow> solve_log;
  std::vector<AdaptationDelta> deltas;  ///< filled when requested
  std::string fault;                    ///< reason for an early stop
};

struct RunOptions
{
  bool keep_deltas = false;
  Vector signal_power;  ///< noise calibration; empty: computed from a clean rollout
};

/**
 * @brief One episode of the measure / lift / adapt / solve / apply loop.
 *
 * Step k: observe x_k with noise, record the residual of the previous prediction, update the
 * delta (adaptive mode), solve the MPC with the reference over steps k+1..k+S, then integrate
 * the true plant over one period. The row for step k holds x_k, its observation, the reference
 * at t_k and the applied input.
 */
inline RunResult run_closed_loop(const ExperimentConfig & cfg, const KoopmanModel & model, RunOptions opt = {});

/**
 * @brief Per-channel mean-square of the clean state over a noise-free nominal-mode rollout of the episode.
 *
 * Both modes of a paired comparison calibrate against the same rollout. Channels that stay at zero
 * get the smallest positive power, i.e. no noise.
 */
inline Vector rollout_signal_power(const ExperimentConfig & cfg, const KoopmanModel & model)
{
  ExperimentConfig clean = cfg;
  clean.snr_db           = std::numeric_limits<double>::infinity();
  clean.mode             = RunMode::nominal;
  const RunResult r      = run_closed_loop(clean, model);
  const int n            = r.trace.n;
  Vector p               = Vector::Zero(n);
  if (r.trace.size() > 0) { p = calibrate_signal_power(r.trace.x); }
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (!(p(i) > 0) || !std::isfinite(p(i))) { p(i) = std::numeric_limits<double>::min(); }
  }
  return p;
}

inline RunResult run_closed_loop(const ExperimentConfig & cfg, const KoopmanModel & model, RunOptions opt)
{
  cfg.validate();
  model.validate();
  const Plant plant(episode_params(cfg), cfg.disturbance, cfg.substeps);
  const int n = plant.state_dim(), m = plant.input_dim();
  if (model.n != n || model.m != m) {
    throw DimensionError("run_closed_loop: model dimensions (" + std::to_string(model.n) + ", " + std::to_string(model.m)
                         + ") do not match the " + to_string(cfg.system) + " plant");
  }
  const double dt = cfg.dt();
  const long N    = cfg.steps();
  const int S     = cfg.mpc.horizon;

  Vector x        = episode_initial_state(cfg, n);
  const Vector x0 = x;
  NoiseSpec noise;
  noise.snr_db = cfg.snr_db;
  if (noise.enabled()) {
    noise.signal_power = opt.signal_power.size() > 0 ? opt.signal_power : rollout_signal_power(cfg, model);
    require_size(noise.signal_power, n, "signal_power");
  }
  Rng noise_rng = substream(cfg.seed, kStreamNoise);
  Rng gust_rng  = substream(cfg.seed, kStreamGust);

  MpcController mpc(model, cfg.mpc);
  const bool adaptive = cfg.mode == RunMode::adaptive;
  AdaptationWindow window(cfg.adapt.window);
  Adaptor adaptor(model, cfg.adapt);
  AdaptationDelta zero = AdaptationDelta::zero(model);

  RunResult res;
  Trace & tr = res.trace;
  tr.system  = cfg.system;
  tr.n       = n;
  tr.m       = m;
  tr.x.resize(n, N);
  tr.x_obs.resize(n, N);
  tr.x_ref.resize(n, N);
  tr.u.resize(m, N);

  Vector z_prev, u_prev = Vector::Zero(m);
  Matrix ref(n, S);
  long k = 0;
  Plant gust_plant = plant;
  for (; k < N; ++k) {
    const double t = double(k) * dt;
    if (!x.allFinite() || x.lpNorm<Eigen::Infinity>() > cfg.divergence_guard) {
      res.metrics.diverged = true;
      res.fault            = "state norm above divergence guard at step " + std::to_string(k);
      break;
    }
    const Vector x_obs = add_measurement_noise(x, noise, noise_rng);
    const Vector z_obs = lift(model, x_obs);

    double adapt_ms = 0;
    const AdaptationDelta * delta = &zero;
    if (adaptive) {
      const auto ta = std::chrono::steady_clock::now();
      if (k > 0) {
        const AdaptationDelta * basis = cfg.adapt.compounding ? &adaptor.delta() : nullptr;
        window.record_step(z_obs, u_prev, predict(model, z_prev, u_prev, basis));
      } else {
        window.record_step(z_obs, u_prev, z_obs);
      }
      delta    = &adaptor.update(window);
      adapt_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - ta).count();
      res.adapt_log.push_back({k, adaptor.last_log().residual_norm, delta->dA.norm(), delta->dB.norm(), adaptor.last_log().loss});
    }
    if (opt.keep_deltas) { res.deltas.push_back(*delta); }

    for (int j = 0; j < S; ++j) { ref.col(j) = reference_at(cfg.reference, t + double(j + 1) * dt, cfg.system, n, x0); }
    const MpcSolution sol = mpc.solve_lifted(z_obs, ref, adaptive ? delta : nullptr);
    const std::string status = sol.degraded ? "degraded" : to_string(sol.status);
    res.solve_log.push_back({k, status, sol.iterations, sol.prim_res, sol.dual_res, sol.solve_ms});

    tr.step.push_back(k);
    tr.t.push_back(t);
    tr.x.col(k)     = x;
    tr.x_obs.col(k) = x_obs;
    tr.x_ref.col(k) = reference_at(cfg.reference, t, cfg.system, n, x0);
    tr.u.col(k)     = sol.u0;
    tr.solve_status.push_back(status);
    tr.solve_ms.push_back(sol.solve_ms);
    tr.adapt_ms.push_back(adapt_ms);
    tr.dA_fro.push_back(delta->dA.norm());
    tr.dB_fro.push_back(delta->dB.norm());

    const Plant * step_plant = &plant;
    if (cfg.system == SystemId::quadrotor && cfg.wind.gust_std > 0) {
      auto & qp = std::get<QuadrotorParams>(gust_plant.params());
      qp.v_w    = std::max(0.0, std::get<QuadrotorParams>(plant.params()).v_w + gaussian(gust_rng, cfg.wind.gust_std));
      step_plant = &gust_plant;
    }
    try {
      x = step_plant->step(x, sol.u0, t, dt, k);
    } catch (const FaultError & e) {
      res.metrics.diverged = true;
      res.fault            = e.what();
      ++k;
      break;
    }
    z_prev = z_obs;
    u_prev = sol.u0;
  }
  tr.x.conservativeResize(n, k);
  tr.x_obs.conservativeResize(n, k);
  tr.x_ref.conservativeResize(n, k);
  tr.u.conservativeResize(m, k);
  const bool diverged = res.metrics.diverged;
  res.metrics          = compute_metrics(tr, 1000.0 * dt);
  res.metrics.diverged = diverged;
  return res;
}

inline void write_adapt_log(const std::vector<AdaptLogRow> & rows, const std::filesystem::path & path)
{
  CsvWriter w(path, {"step", "residual_norm", "dA_fro", "dB_fro", "loss"});
  for (const auto & r : rows) {
    w.row({std::to_string(r.step), format_double(r.residual_norm), format_double(r.dA_fro), format_double(r.dB_fro),
           format_double(r.loss)});
  }
}

inline void write_solve_log(const std::vector<SolveLogRow> & rows, const std::filesystem::path & path)
{
  CsvWriter w(path, {"step", "status", "iterations", "prim_res", "dual_res", "solve_ms"});
  for (const auto & r : rows) {
    w.row({std::to_string(r.step), r.status, std::to_string(r.iterations), format_double(r.prim_res),
           format_double(r.dual_res), format_double(r.solve_ms)});
  }
}

// ---------------------------------------------------------------------------------------------
// Timing
// ---------------------------------------------------------------------------------------------

struct TimingStats
{
  long samples = 0;
  double mean = 0, min = 0, p25 = 0, p50 = 0, p75 = 0, max = 0;
};

/// Linear-interpolated quantile of sorted data.
inline double quantile_sorted(const std::vector<double> & s, double q)
{
  if (s.empty()) { return 0.0; }
  const double pos = q * double(s.size() - 1);
  const auto lo    = std::size_t(std::floor(pos));
  const auto hi    = std::min(lo + 1, s.size() - 1);
  return s[lo] + (pos - double(lo)) * (s[hi] - s[lo]);
}

/// Per-step compute time (adapt + solve, ms) pooled over traces.
inline TimingStats timing_report(const std::vector<const Trace *> & traces)
{
  std::vector<double> v;
  for (const Trace * tr : traces) {
    for (long k = 0; k < tr->size(); ++k) { v.push_back(tr->solve_ms[std::size_t(k)] + tr->adapt_ms[std::size_t(k)]); }
  }
  TimingStats s;
  s.samples = long(v.size());
  if (v.empty()) { return s; }
  std::sort(v.begin(), v.end());
  double sum = 0;
  for (double e : v) { sum += e; }
  s.mean = sum / double(v.size());
  s.min  = v.front();
  s.p25  = quantile_sorted(v, 0.25);
  s.p50  = quantile_sorted(v, 0.5);
  s.p75  = quantile_sorted(v, 0.75);
  s.max  = v.back();
  return s;
}

inline void write_timing_csv(const std::vector<std::pair<std::string, TimingStats>> & rows, const std::filesystem::path & path)
{
  CsvWriter w(path, {"label", "samples", "mean_ms", "min_ms", "p25_ms", "p50_ms", "p75_ms", "max_ms"});
  for (const auto & [label, s] : rows) {
    w.row({label, std::to_string(s.samples), format_double(s.mean), format_double(s.min), format_double(s.p25),
           format_double(s.p50), format_double(s.p75), format_double(s.max)});
  }
}

// ---------------------------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------------------------

/// Grid over one uncertainty axis (delta, c or f) crossed with SNR values.
struct SweepGrid
{
  ExperimentConfig base;
  std::string axis = "delta";  ///< delta | c | f
  std::vector<double> values;
  std::vector<double> snr_db;  ///< +inf means no noise
  std::uint64_t seed = 1;
  int threads        = 0;  ///< 0: hardware concurrency
};

inline SweepGrid sweep_grid_from_json(const Json & j, const std::filesystem::path & base_dir = {})
{
  check_keys(j, {"base", "axis", "values", "snr_db", "seed", "threads"}, "sweep grid");
  if (!j.contains("base")) { throw ConfigError("sweep grid: missing 'base' experiment"); }
  SweepGrid g;
  g.base = experiment_from_json(j.at("base"), base_dir);
  g.axis = get_or<std::string>(j, "axis", g.axis);
  if (g.axis != "delta" && g.axis != "c" && g.axis != "f") { throw ConfigError("sweep grid: axis must be delta, c or f"); }
  g.values = get_or<std::vector<double>>(j, "values", {});
  if (j.contains("snr_db")) {
    for (const auto & v : j.at("snr_db")) {
      const Json wrap = {{"v", v}};
      g.snr_db.push_back(number_or_inf(wrap, "v", 0.0));
    }
  }
  if (g.snr_db.empty()) { g.snr_db.push_back(std::numeric_limits<double>::infinity()); }
  g.seed    = get_or<std::uint64_t>(j, "seed", g.seed);
  g.threads = get_or(j, "threads", g.threads);
  if (g.values.empty()) { throw ConfigError("sweep grid: 'values' must be non-empty"); }
  return g;
}

struct SweepCell
{
  double value = 0, snr_db = 0;
  MetricsReport nominal, adaptive;
  std::string status = "ok";
};

/// Config of one grid cell; both modes share the cell seed.
inline ExperimentConfig sweep_cell_config(const SweepGrid & g, std::size_t index, double value, double snr, RunMode mode)
{
  ExperimentConfig c = g.base;
  c.mode             = mode;
  c.snr_db           = snr;
  c.seed             = mix_seed(g.seed ^ mix_seed(std::uint64_t(index) + 1));
  if (g.axis == "delta") {
    c.uncertainty.delta_pct = value;
  } else if (g.axis == "c") {
    if (c.disturbance.kind == DisturbanceSpec::Kind::none) { c.disturbance.kind = DisturbanceSpec::Kind::constant; }
    c.disturbance.c = value;
  } else {
    c.disturbance.kind = DisturbanceSpec::Kind::sinusoid;
    c.disturbance.freq = value;
  }
  c.validate();
  return c;
}

/// Paired nominal/adaptive episodes for every (value, snr) cell, cells run concurrently.
inline std::vector<SweepCell> run_sweep(const SweepGrid & g, const KoopmanModel & model)
{
  std::vector<SweepCell> cells;
  for (double v : g.values) {
    for (double s : g.snr_db) { cells.push_back({v, s, {}, {}, "ok"}); }
  }
  if (cells.empty()) { throw ConfigError("sweep: empty grid"); }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      auto & cell = cells[i];
      try {
        const auto cn = sweep_cell_config(g, i, cell.value, cell.snr_db, RunMode::nominal);
        RunOptions opt;
        if (std::isfinite(cell.snr_db)) { opt.signal_power = rollout_signal_power(cn, model); }
        cell.nominal  = run_closed_loop(cn, model, opt).metrics;
        cell.adaptive = run_closed_loop(sweep_cell_config(g, i, cell.value, cell.snr_db, RunMode::adaptive), model, opt).metrics;
        if (cell.nominal.diverged || cell.adaptive.diverged) {
          cell.status = std::string("diverged:") + (cell.nominal.diverged ? "nominal" : "") + (cell.adaptive.diverged ? "adaptive" : "");
        }
      } catch (const std::exception & e) {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), ',', ';');
        cell.status = "error: " + msg;
      }
    }
  };
  unsigned threads = g.threads > 0 ? unsigned(g.threads) : std::max(1u, std::thread::hardware_concurrency());
  threads          = std::min<unsigned>(threads, unsigned(cells.size()));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < threads; ++t) { pool.emplace_back(worker); }
  worker();
  for (auto & th : pool) { th.join(); }
  return cells;
}

inline void write_sweep_csv(const SweepGrid & g, const std::vector<SweepCell> & cells, const std::filesystem::path & path)
{
  CsvWriter w(path, {g.axis, "snr", "e_theta_nom", "e_theta_adapt", "improvement_theta", "e_thetadot_nom",
                     "e_thetadot_adapt", "improvement_thetadot", "status"});
  for (const auto & c : cells) {
    const bool ok = c.status.rfind("error", 0) != 0;
    auto num      = [&](double v) { return ok ? format_double(v) : std::string("nan"); };
    w.row({format_double(c.value), std::isinf(c.snr_db) ? std::string("inf") : format_double(c.snr_db),
           num(c.nominal.e_theta), num(c.adaptive.e_theta), num(improvement_pct(c.nominal.e_theta, c.adaptive.e_theta)),
           num(c.nominal.e_thetadot), num(c.adaptive.e_thetadot),
           num(improvement_pct(c.nominal.e_thetadot, c.adaptive.e_thetadot)), c.status});
  }
}

}  // namespace akmpc
