#pragma once

/**
 * @file
 * @brief Ground-truth plant simulators: coupled pendulum chain, planar 3R manipulator and planar
 * quadrotor with wind, plus the integrator and uncertainty injection used by the experiments.
 */

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <type_traits>
#include <variant>

#include "random.hpp"
#include "types.hpp"

namespace akmpc {

enum class SystemId { pendulum, manipulator, quadrotor };

inline std::string to_string(SystemId s)
{
  switch (s) {
    case SystemId::pendulum: return "pendulum";
    case SystemId::manipulator: return "manipulator";
    case SystemId::quadrotor: return "quadrotor";
  }
  return "?";
}

inline SystemId system_from_string(const std::string & s)
{
  if (s == "pendulum") { return SystemId::pendulum; }
  if (s == "manipulator") { return SystemId::manipulator; }
  if (s == "quadrotor") { return SystemId::quadrotor; }
  throw ConfigError("unknown system '" + s + "'");
}

// ---------------------------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------------------------

/// Chain of N identical pendulums on a common axis, coupled by torsion springs with dampers.
/// Actuated by a single torque on pendulum 1.
struct PendulumChainParams
{
  int N        = 5;
  double m     = 0.017;
  double l     = 0.1;
  double I     = 0.017 * 0.1 * 0.1;  // m l^2
  double gamma = 3.1956332e-4;
  double b     = 6.819e-4;
  double kappa = 0.079;
  double g     = 9.81;

  void validate() const
  {
    if (N < 2) { throw ConfigError("pendulum chain needs N >= 2"); }
    if (!(m > 0 && l > 0 && I > 0 && gamma > 0 && b > 0 && kappa > 0 && g > 0)) {
      throw ConfigError("pendulum parameters must be strictly positive");
    }
  }
};

/// Planar 3R arm with uniform thin-rod links (centre of mass at mid-link).
struct ManipulatorParams
{
  std::array<double, 3> mass{0.8, 0.8, 0.8};
  std::array<double, 3> length{1.0, 1.0, 1.0};
  std::array<double, 3> inertia{0.8 / 12.0, 0.8 / 12.0, 0.8 / 12.0};
  double g = 9.81;

  /// Links with inertia m l^2 / 12.
  static ManipulatorParams thin_rods(std::array<double, 3> m, std::array<double, 3> l, double g = 9.81)
  {
    ManipulatorParams p;
    p.mass   = m;
    p.length = l;
    for (int i = 0; i < 3; ++i) { p.inertia[i] = m[i] * l[i] * l[i] / 12.0; }
    p.g = g;
    return p;
  }

  void validate() const
  {
    for (int i = 0; i < 3; ++i) {
      if (!(mass[i] > 0 && length[i] > 0 && inertia[i] >= 0)) {
        throw ConfigError("manipulator link parameters must be positive");
      }
    }
  }
};

struct QuadrotorParams
{
  double m       = 2.0;
  double I       = 1.0;
  double l_arm   = 0.2;
  double g       = 9.81;
  double K       = 0.1;  ///< wind drag coefficient (kg/m)
  double v_w     = 0.0;  ///< wind speed (m/s)
  double alpha_w = 0.0;  ///< wind direction, anticlockwise from the y axis (rad)

  void validate() const
  {
    if (!(m > 0 && I > 0 && l_arm > 0)) { throw ConfigError("quadrotor m, I, l_arm must be > 0"); }
    if (K < 0 || v_w < 0) { throw ConfigError("quadrotor K and v_w must be >= 0"); }
  }
};

// ---------------------------------------------------------------------------------------------
// Coupled pendulum chain
// ---------------------------------------------------------------------------------------------

/// Unweighted path-graph Laplacian of an N-node chain.
inline Matrix path_laplacian(int N)
{
  Matrix L = Matrix::Zero(N, N);
  for (int i = 0; i + 1 < N; ++i) {
    L(i, i) += 1;
    L(i + 1, i + 1) += 1;
    L(i, i + 1) -= 1;
    L(i + 1, i) -= 1;
  }
  return L;
}

/// State is interleaved [theta_1, dtheta_1, ..., theta_N, dtheta_N]; u is the torque on pendulum 1.
inline Vector pendulum_deriv(const Vector & x, double u, const PendulumChainParams & p)
{
  const int N = p.N;
  require_size(x, 2 * N, "pendulum_deriv");

  Vector dx(2 * N);
  for (int i = 0; i < N; ++i) {
    const double th = x(2 * i), w = x(2 * i + 1);

    // path Laplacian applied to (kappa theta + b dtheta)
    double coupling = 0.0;
    if (i > 0) { coupling += p.kappa * (th - x(2 * (i - 1))) + p.b * (w - x(2 * (i - 1) + 1)); }
    if (i + 1 < N) { coupling += p.kappa * (th - x(2 * (i + 1))) + p.b * (w - x(2 * (i + 1) + 1)); }

    dx(2 * i)     = w;
    dx(2 * i + 1) = -(p.m * p.g * p.l / p.I) * std::sin(th) - (p.gamma / p.I) * w - coupling / p.I;
  }
  dx(1) += u / p.I;
  return dx;
}

// ---------------------------------------------------------------------------------------------
// 3R manipulator
// ---------------------------------------------------------------------------------------------

namespace detail {

/// M(theta) = M0 + cos(t2) Ma + cos(t3) Mb + cos(t2 + t3) Mc; each term is constant.
struct ManipulatorInertiaTerms
{
  Eigen::Matrix3d M0, Ma, Mb, Mc;
};

inline ManipulatorInertiaTerms manipulator_inertia_terms(const ManipulatorParams & p)
{
  const auto & m = p.mass;
  const auto & l = p.length;
  const auto & I = p.inertia;
  const double r1 = l[0] / 2, r2 = l[1] / 2, r3 = l[2] / 2;

  ManipulatorInertiaTerms t;
  t.M0.setZero();
  t.Ma.setZero();
  t.Mb.setZero();
  t.Mc.setZero();

  t.M0(0, 0) = I[0] + I[1] + I[2] + m[0] * r1 * r1 + m[1] * (l[0] * l[0] + r2 * r2)
             + m[2] * (l[0] * l[0] + l[1] * l[1] + r3 * r3);
  t.M0(0, 1) = I[1] + I[2] + m[1] * r2 * r2 + m[2] * (l[1] * l[1] + r3 * r3);
  t.M0(0, 2) = I[2] + m[2] * r3 * r3;
  t.M0(1, 1) = I[1] + I[2] + m[1] * r2 * r2 + m[2] * (l[1] * l[1] + r3 * r3);
  t.M0(1, 2) = I[2] + m[2] * r3 * r3;
  t.M0(2, 2) = I[2] + m[2] * r3 * r3;

  t.Ma(0, 0) = 2 * (m[1] * l[0] * r2 + m[2] * l[0] * l[1]);
  t.Ma(0, 1) = m[1] * l[0] * r2 + m[2] * l[0] * l[1];

  t.Mb(0, 0) = 2 * m[2] * l[1] * r3;
  t.Mb(0, 1) = 2 * m[2] * l[1] * r3;
  t.Mb(0, 2) = m[2] * l[1] * r3;
  t.Mb(1, 1) = 2 * m[2] * l[1] * r3;
  t.Mb(1, 2) = m[2] * l[1] * r3;

  t.Mc(0, 0) = 2 * m[2] * l[0] * r3;
  t.Mc(0, 1) = m[2] * l[0] * r3;
  t.Mc(0, 2) = m[2] * l[0] * r3;

  for (auto * M : {&t.M0, &t.Ma, &t.Mb, &t.Mc}) {
    M->triangularView<Eigen::StrictlyLower>() = M->transpose().triangularView<Eigen::StrictlyLower>();
  }
  return t;
}

}  // namespace detail

/// Joint-space inertia matrix. Joint angles are relative; theta = 0 is the arm stretched along +x,
/// gravity acts along -y.
inline Eigen::Matrix3d manipulator_mass_matrix(const Eigen::Vector3d & th, const ManipulatorParams & p)
{
  const auto t = detail::manipulator_inertia_terms(p);
  return t.M0 + std::cos(th(1)) * t.Ma + std::cos(th(2)) * t.Mb + std::cos(th(1) + th(2)) * t.Mc;
}

/// Coriolis and centrifugal torques C(theta, dtheta) as a vector.
inline Eigen::Vector3d manipulator_coriolis(
  const Eigen::Vector3d & th, const Eigen::Vector3d & dth, const ManipulatorParams & p)
{
  const auto t    = detail::manipulator_inertia_terms(p);
  const double s2 = std::sin(th(1)), s3 = std::sin(th(2)), s23 = std::sin(th(1) + th(2));

  // dM/dtheta_k; dM/dtheta_1 = 0
  const Eigen::Matrix3d dM2 = -s2 * t.Ma - s23 * t.Mc;
  const Eigen::Matrix3d dM3 = -s3 * t.Mb - s23 * t.Mc;

  const Eigen::Matrix3d Mdot = dM2 * dth(1) + dM3 * dth(2);
  Eigen::Vector3d dT;
  dT << 0.0, 0.5 * dth.dot(dM2 * dth), 0.5 * dth.dot(dM3 * dth);
  return Mdot * dth - dT;
}

inline Eigen::Vector3d manipulator_gravity(const Eigen::Vector3d & th, const ManipulatorParams & p)
{
  const auto & m = p.mass;
  const auto & l = p.length;
  const double c1 = std::cos(th(0)), c12 = std::cos(th(0) + th(1)),
               c123 = std::cos(th(0) + th(1) + th(2));
  Eigen::Vector3d G;
  G(2) = p.g * m[2] * l[2] / 2 * c123;
  G(1) = p.g * (m[1] * l[1] / 2 * c12 + m[2] * (l[1] * c12 + l[2] / 2 * c123));
  G(0) = p.g * (m[0] * l[0] / 2 * c1 + m[1] * (l[0] * c1 + l[1] / 2 * c12)
                + m[2] * (l[0] * c1 + l[1] * c12 + l[2] / 2 * c123));
  return G;
}

/// Condition number above which the mass matrix is reported as singular.
inline constexpr double kManipulatorMaxCondition = 1e10;

/// x = [theta; dtheta], tau = joint torques.
inline Vector manipulator_deriv(const Vector & x, const Vector & tau, const ManipulatorParams & p)
{
  require_size(x, 6, "manipulator_deriv state");
  require_size(tau, 3, "manipulator_deriv torque");
  const Eigen::Vector3d th = x.head<3>(), dth = x.tail<3>();

  const Eigen::Matrix3d M = manipulator_mass_matrix(th, p);
  const Eigen::LDLT<Eigen::Matrix3d> ldlt(M);
  const Eigen::Vector3d D = ldlt.vectorD();
  if (ldlt.info() != Eigen::Success || D.minCoeff() <= 0
      || D.maxCoeff() / D.minCoeff() > kManipulatorMaxCondition) {
    throw FaultError("manipulator: mass matrix numerically singular");
  }

  const Eigen::Vector3d rhs = tau.head<3>() - manipulator_coriolis(th, dth, p) - manipulator_gravity(th, p);
  Vector dx(6);
  dx.head<3>() = dth;
  dx.tail<3>() = ldlt.solve(rhs);
  return dx;
}

// ---------------------------------------------------------------------------------------------
// Planar quadrotor
// ---------------------------------------------------------------------------------------------

/// Wind drag force [F_y, F_z, 0].
inline Eigen::Vector3d quadrotor_wind_force(const QuadrotorParams & p)
{
  const double f = p.K * p.v_w * p.v_w;
  return {f * std::cos(p.alpha_w), f * std::sin(p.alpha_w), 0.0};
}

/// x = [y, z, theta, dy, dz, dtheta], u = [T1, T2].
inline Vector quadrotor_deriv(const Vector & x, const Vector & u, const QuadrotorParams & p)
{
  require_size(x, 6, "quadrotor_deriv state");
  require_size(u, 2, "quadrotor_deriv input");
  const double th = x(2), T = u(0) + u(1);
  const Eigen::Vector3d Fw = quadrotor_wind_force(p);

  Vector dx(6);
  dx.head<3>() = x.tail<3>();
  dx(3) = -std::sin(th) / p.m * T + Fw(0) / p.m;
  dx(4) = -p.g + std::cos(th) / p.m * T + Fw(1) / p.m;
  dx(5) = p.l_arm / p.I * (u(1) - u(0)) + Fw(2) / p.m;
  return dx;
}

// ---------------------------------------------------------------------------------------------
// Integration
// ---------------------------------------------------------------------------------------------

/// Classical RK4 step with u held over the step. f(t, x, u) -> dx.
template<typename F>
Vector rk4_step(F && f, double t, const Vector & x, const Vector & u, double dt)
{
  const Vector k1 = f(t, x, u);
  const Vector k2 = f(t + dt / 2, x + dt / 2 * k1, u);
  const Vector k3 = f(t + dt / 2, x + dt / 2 * k2, u);
  const Vector k4 = f(t + dt, x + dt * k3, u);
  return x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
}

/// Time-invariant overload, f(x, u) -> dx.
template<typename F>
  requires std::is_invocable_r_v<Vector, F, const Vector &, const Vector &>
Vector rk4_step(F && f, const Vector & x, const Vector & u, double dt)
{
  if (!(dt > 0)) { throw ConfigError("rk4_step: dt must be > 0"); }
  return rk4_step([&f](double, const Vector & xx, const Vector & uu) { return f(xx, uu); }, 0.0, x, u, dt);
}

// ---------------------------------------------------------------------------------------------
// Uncertainty injection
// ---------------------------------------------------------------------------------------------

namespace detail {

inline double perturb_factor(double delta_pct, Rng & rng)
{
  const bool up = std::bernoulli_distribution(0.5)(rng);
  return up ? 1.0 + delta_pct / 100.0 : 1.0 - delta_pct / 100.0;
}

inline void check_delta(double delta_pct)
{
  if (!(delta_pct >= 0.0 && delta_pct < 100.0)) {
    throw ConfigError("perturbation percentage must lie in [0, 100)");
  }
}

}  // namespace detail

/// Each of I, m, l, gamma, kappa, b independently scaled by (1 +- delta/100).
inline PendulumChainParams perturb_params(PendulumChainParams p, double delta_pct, Rng & rng)
{
  detail::check_delta(delta_pct);
  for (double * v : {&p.I, &p.m, &p.l, &p.gamma, &p.kappa, &p.b}) {
    *v *= detail::perturb_factor(delta_pct, rng);
  }
  return p;
}

/// Link masses, lengths and inertias independently scaled.
inline ManipulatorParams perturb_params(ManipulatorParams p, double delta_pct, Rng & rng)
{
  detail::check_delta(delta_pct);
  for (int i = 0; i < 3; ++i) {
    p.mass[i] *= detail::perturb_factor(delta_pct, rng);
    p.length[i] *= detail::perturb_factor(delta_pct, rng);
    p.inertia[i] *= detail::perturb_factor(delta_pct, rng);
  }
  return p;
}

inline QuadrotorParams perturb_params(QuadrotorParams p, double delta_pct, Rng & rng)
{
  detail::check_delta(delta_pct);
  for (double * v : {&p.m, &p.I, &p.l_arm, &p.K}) { *v *= detail::perturb_factor(delta_pct, rng); }
  return p;
}

struct DisturbanceSpec
{
  enum class Kind { none, constant, sinusoid };
  Kind kind   = Kind::none;
  double c    = 0.0;  ///< amplitude (N m)
  double freq = 1.0;  ///< Hz, sinusoid only

  void validate() const
  {
    if (kind == Kind::sinusoid && !(freq > 0)) { throw ConfigError("sinusoidal disturbance needs f > 0"); }
  }
};

inline double disturbance_torque(double t, const DisturbanceSpec & d)
{
  switch (d.kind) {
    case DisturbanceSpec::Kind::none: return 0.0;
    case DisturbanceSpec::Kind::constant: return d.c;
    case DisturbanceSpec::Kind::sinusoid: return d.c * std::sin(2 * std::numbers::pi * d.freq * t);
  }
  return 0.0;
}

struct NoiseSpec
{
  /// Noise is off when snr_db is infinite.
  double snr_db = std::numeric_limits<double>::infinity();
  /// Reference signal power per channel.
  Vector signal_power;

  bool enabled() const { return std::isfinite(snr_db); }

  /// Per-channel noise variance = power / 10^(snr/10).
  Vector variance() const
  {
    if (!enabled()) { return Vector::Zero(signal_power.size()); }
    return signal_power / std::pow(10.0, snr_db / 10.0);
  }
};

/// Mean-square per channel over the columns of a clean trajectory (n x T).
inline Vector calibrate_signal_power(const Matrix & clean)
{
  if (clean.cols() == 0) { throw ConfigError("noise calibration needs a non-empty trajectory"); }
  return clean.array().square().rowwise().mean();
}

inline Vector add_measurement_noise(const Vector & x_clean, const NoiseSpec & n, Rng & rng)
{
  if (!n.enabled()) { return x_clean; }
  if (n.signal_power.size() != x_clean.size()) {
    throw ConfigError("measurement noise: missing or mis-sized signal-power calibration");
  }
  if ((n.signal_power.array() <= 0).any()) {
    throw ConfigError("measurement noise: calibration powers must be positive");
  }
  const Vector sd = n.variance().cwiseSqrt();
  Vector x        = x_clean;
  for (Eigen::Index i = 0; i < x.size(); ++i) { x(i) += gaussian(rng, sd(i)); }
  return x;
}

// ---------------------------------------------------------------------------------------------
// Plant: one system with its (possibly perturbed) parameters and input disturbance
// ---------------------------------------------------------------------------------------------

using SystemParams = std::variant<PendulumChainParams, ManipulatorParams, QuadrotorParams>;

inline SystemParams default_params(SystemId id)
{
  switch (id) {
    case SystemId::pendulum: return PendulumChainParams{};
    case SystemId::manipulator: return ManipulatorParams{};
    case SystemId::quadrotor: return QuadrotorParams{};
  }
  return PendulumChainParams{};
}

class Plant
{
public:
  Plant() = default;
  explicit Plant(SystemParams params, DisturbanceSpec dist = {}, int substeps = 10)
      : params_(std::move(params)), dist_(dist), substeps_(substeps)
  {
    std::visit([](const auto & p) { p.validate(); }, params_);
    dist_.validate();
    if (substeps_ < 1) { throw ConfigError("integrator substeps must be >= 1"); }
  }

  SystemId id() const
  {
    if (std::holds_alternative<PendulumChainParams>(params_)) { return SystemId::pendulum; }
    if (std::holds_alternative<ManipulatorParams>(params_)) { return SystemId::manipulator; }
    return SystemId::quadrotor;
  }

  int state_dim() const
  {
    if (auto p = std::get_if<PendulumChainParams>(&params_)) { return 2 * p->N; }
    return 6;
  }

  int input_dim() const
  {
    switch (id()) {
      case SystemId::pendulum: return 1;
      case SystemId::manipulator: return 3;
      case SystemId::quadrotor: return 2;
    }
    return 0;
  }

  const SystemParams & params() const { return params_; }
  SystemParams & params() { return params_; }
  const DisturbanceSpec & disturbance() const { return dist_; }
  int substeps() const { return substeps_; }

  /// Right-hand side including the input disturbance (pendulum only: torque on pendulum 1).
  Vector deriv(double t, const Vector & x, const Vector & u) const
  {
    return std::visit(
      [&](const auto & p) -> Vector {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, PendulumChainParams>) {
          require_size(u, 1, "pendulum input");
          return pendulum_deriv(x, u(0) + disturbance_torque(t, dist_), p);
        } else if constexpr (std::is_same_v<P, ManipulatorParams>) {
          return manipulator_deriv(x, u, p);
        } else {
          return quadrotor_deriv(x, u, p);
        }
      },
      params_);
  }

  /// Advance one sampling period dt with zero-order hold on u using `substeps` RK4 steps.
  /// Throws FaultError on a non-finite state, naming the system and step index.
  Vector step(const Vector & x, const Vector & u, double t, double dt, long step_index = -1) const
  {
    const double h = dt / substeps_;
    Vector xn      = x;
    for (int s = 0; s < substeps_; ++s) {
      xn = rk4_step(
        [this](double tt, const Vector & xx, const Vector & uu) { return deriv(tt, xx, uu); },
        t + s * h, xn, u, h);
    }
    if (!xn.allFinite()) {
      throw FaultError(
        to_string(id()) + ": non-finite state after integration step " + std::to_string(step_index));
    }
    return xn;
  }

private:
  SystemParams params_ = PendulumChainParams{};
  DisturbanceSpec dist_{};
  int substeps_ = 10;
};

}  // namespace akmpc
