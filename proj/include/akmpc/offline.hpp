#pragma once

/**
 * @file
 * @brief Nominal snapshot datasets (generation, CSV storage) and offline training of the lifted
 * model with the composite reconstruction / prediction / lifting loss.
 */

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <optional>
#include <vector>

#include <unsupported/Eigen/MatrixFunctions>

#include "csv.hpp"
#include "dynamics.hpp"
#include "json_util.hpp"
#include "koopman.hpp"

namespace akmpc {

// ---------------------------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------------------------

/// One simulated trajectory: states x_0..x_{N-1} and the inputs applied at each of those instants.
struct Trajectory
{
  Matrix states;  ///< n x N
  Matrix inputs;  ///< m x N; column N-1 was computed but never integrated
  bool validation = false;

  Eigen::Index snapshots() const { return states.cols(); }
  Eigen::Index pairs() const { return std::max<Eigen::Index>(states.cols() - 1, 0); }

  Matrix X() const { return states.leftCols(pairs()); }
  Matrix Y() const { return states.rightCols(pairs()); }
  Matrix U() const { return inputs.leftCols(pairs()); }
};

struct SnapshotBatch
{
  Matrix X, Y, U;

  Eigen::Index size() const { return X.cols(); }
};

struct SnapshotDataset
{
  SystemId system = SystemId::pendulum;
  int n = 0, m = 0;
  double dt           = 0.01;
  std::uint64_t seed  = 0;
  int rejected        = 0;  ///< trajectories discarded and resampled during generation
  std::vector<Trajectory> trajectories;

  std::size_t count(bool validation) const
  {
    return std::size_t(std::count_if(trajectories.begin(), trajectories.end(),
                                     [&](const Trajectory & t) { return t.validation == validation; }));
  }

  /// All (x_k, x_{k+1}, u_k) columns of one split, concatenated.
  SnapshotBatch stack(bool validation) const
  {
    Eigen::Index total = 0;
    for (const auto & t : trajectories) {
      if (t.validation == validation) { total += t.pairs(); }
    }
    SnapshotBatch b{Matrix(n, total), Matrix(n, total), Matrix(m, total)};
    Eigen::Index k = 0;
    for (const auto & t : trajectories) {
      if (t.validation != validation) { continue; }
      const auto c            = t.pairs();
      b.X.middleCols(k, c) = t.X();
      b.Y.middleCols(k, c) = t.Y();
      b.U.middleCols(k, c) = t.U();
      k += c;
    }
    return b;
  }
};

/// Gathers the given columns of a stacked batch.
inline SnapshotBatch gather(const SnapshotBatch & all, std::span<const Eigen::Index> cols)
{
  SnapshotBatch b{Matrix(all.X.rows(), Eigen::Index(cols.size())), Matrix(all.Y.rows(), Eigen::Index(cols.size())),
                  Matrix(all.U.rows(), Eigen::Index(cols.size()))};
  for (std::size_t i = 0; i < cols.size(); ++i) {
    b.X.col(Eigen::Index(i)) = all.X.col(cols[i]);
    b.Y.col(Eigen::Index(i)) = all.Y.col(cols[i]);
    b.U.col(Eigen::Index(i)) = all.U.col(cols[i]);
  }
  return b;
}

// ---------------------------------------------------------------------------------------------
// Generation config
// ---------------------------------------------------------------------------------------------

struct GenConfig
{
  int trajectories      = 100;
  int snapshots         = 800;
  double dt             = 0.01;
  std::uint64_t seed    = 0;
  double train_fraction = 0.75;
  int substeps          = 10;
  int max_resample      = 50;
  double divergence_guard = 1e4;

  // pendulum chain: random initial angles, sum-of-sinusoids torque
  double theta_min = -20, theta_max = 20;
  double thetadot_min = -1, thetadot_max = 1;
  double input_limit = 0.2;  ///< |u| clip (N m)
  int sinusoids      = 5;
  double freq_min = 0.1, freq_max = 5.0;

  // manipulator / quadrotor: cubic waypoint references tracked by a nominal controller
  double waypoint_interval = 0.5;  ///< s between waypoints
  double position_range    = 1.5;  ///< joint angles (rad) or y/z positions (m) drawn in [-r, r]
  double velocity_range    = 1.0;  ///< waypoint slopes drawn in [-v, v]
  double kp = 100, kd = 20;        ///< computed-torque gains
  double torque_limit  = 50;       ///< manipulator |tau| clip (N m)
  double excitation_std = 1.0;     ///< Gaussian input dither added to the controller output
  Vector lqr_q = (Vector(6) << 10, 10, 10, 1, 1, 1).finished();
  Vector lqr_r = Vector::Ones(2);
  double thrust_min = 0, thrust_max = 20;

  /// Protocol defaults per system (trajectory lengths differ).
  static GenConfig defaults(SystemId s)
  {
    GenConfig c;
    switch (s) {
      case SystemId::pendulum: c.snapshots = 800; break;
      case SystemId::manipulator:
        c.snapshots         = 100;
        c.waypoint_interval = 2.0;
        c.position_range    = 1.2;
        c.velocity_range    = 1.0;
        c.torque_limit      = 80;
        c.excitation_std    = 1.0;
        break;
      case SystemId::quadrotor:
        c.snapshots         = 600;
        c.waypoint_interval = 2.0;
        c.position_range    = 3.0;
        c.velocity_range    = 1.5;
        c.excitation_std    = 0.5;
        break;
    }
    return c;
  }

  void validate() const
  {
    if (trajectories < 0 || snapshots < 0) { throw ConfigError("generate: counts must be >= 0"); }
    if (!(dt > 0)) { throw ConfigError("generate: dt must be > 0"); }
    if (!(train_fraction > 0 && train_fraction <= 1)) { throw ConfigError("generate: train_fraction in (0, 1]"); }
    if (!(freq_min > 0 && freq_max >= freq_min)) { throw ConfigError("generate: bad frequency band"); }
    if (!(waypoint_interval > 0)) { throw ConfigError("generate: waypoint_interval must be > 0"); }
    if (lqr_q.size() != 6 || lqr_r.size() != 2) { throw ConfigError("generate: lqr_q needs 6 and lqr_r 2 entries"); }
  }
};

inline GenConfig gen_config_from_json(SystemId s, const Json & j)
{
  check_keys(j,
             {"trajectories", "snapshots", "dt", "seed", "train_fraction", "substeps", "max_resample",
              "divergence_guard", "theta_range", "thetadot_range", "input_limit", "sinusoids", "freq_range",
              "waypoint_interval", "position_range", "velocity_range", "kp", "kd", "torque_limit", "excitation_std",
              "lqr_q", "lqr_r", "thrust_range", "system"},
             "generate config");
  GenConfig c         = GenConfig::defaults(s);
  c.trajectories      = get_or(j, "trajectories", c.trajectories);
  c.snapshots         = get_or(j, "snapshots", c.snapshots);
  c.dt                = get_or(j, "dt", c.dt);
  c.seed              = get_or(j, "seed", c.seed);
  c.train_fraction    = get_or(j, "train_fraction", c.train_fraction);
  c.substeps          = get_or(j, "substeps", c.substeps);
  c.max_resample      = get_or(j, "max_resample", c.max_resample);
  c.divergence_guard  = get_or(j, "divergence_guard", c.divergence_guard);
  auto range          = [&](const char * key, double & lo, double & hi) {
    const auto r = get_or<std::vector<double>>(j, key, {lo, hi});
    if (r.size() != 2 || r[0] > r[1]) { throw ConfigError(std::string(key) + ": expected [lo, hi]"); }
    lo = r[0];
    hi = r[1];
  };
  range("theta_range", c.theta_min, c.theta_max);
  range("thetadot_range", c.thetadot_min, c.thetadot_max);
  range("freq_range", c.freq_min, c.freq_max);
  range("thrust_range", c.thrust_min, c.thrust_max);
  c.input_limit       = get_or(j, "input_limit", c.input_limit);
  c.sinusoids         = get_or(j, "sinusoids", c.sinusoids);
  c.waypoint_interval = get_or(j, "waypoint_interval", c.waypoint_interval);
  c.position_range    = get_or(j, "position_range", c.position_range);
  c.velocity_range    = get_or(j, "velocity_range", c.velocity_range);
  c.kp                = get_or(j, "kp", c.kp);
  c.kd                = get_or(j, "kd", c.kd);
  c.torque_limit      = get_or(j, "torque_limit", c.torque_limit);
  c.excitation_std    = get_or(j, "excitation_std", c.excitation_std);
  c.lqr_q             = vector_or(j, "lqr_q", c.lqr_q);
  c.lqr_r             = vector_or(j, "lqr_r", c.lqr_r);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------------------------
// Nominal controllers used while generating data
// ---------------------------------------------------------------------------------------------

/// Piecewise cubic Hermite curve through waypoints spaced `interval` seconds apart.
struct CubicPath
{
  double interval = 1.0;
  Matrix points;  ///< d x K
  Matrix slopes;  ///< d x K, time derivatives at the waypoints

  struct Sample
  {
    Vector q, qd, qdd;
  };

  Sample eval(double t) const
  {
    const Eigen::Index K = points.cols();
    const double tc      = std::clamp(t, 0.0, interval * double(K - 1));
    Eigen::Index seg     = std::min<Eigen::Index>(Eigen::Index(tc / interval), K - 2);
    const double s = tc / interval - double(seg), h = interval;
    const double s2 = s * s, s3 = s2 * s;
    const Vector &p0 = points.col(seg), &p1 = points.col(seg + 1);
    const Vector m0 = slopes.col(seg) * h, m1 = slopes.col(seg + 1) * h;
    Sample out;
    out.q   = (2 * s3 - 3 * s2 + 1) * p0 + (s3 - 2 * s2 + s) * m0 + (-2 * s3 + 3 * s2) * p1 + (s3 - s2) * m1;
    out.qd  = ((6 * s2 - 6 * s) * p0 + (3 * s2 - 4 * s + 1) * m0 + (-6 * s2 + 6 * s) * p1 + (3 * s2 - 2 * s) * m1) / h;
    out.qdd = ((12 * s - 6) * p0 + (6 * s - 4) * m0 + (6 - 12 * s) * p1 + (6 * s - 2) * m1) / (h * h);
    return out;
  }
};

inline CubicPath random_cubic_path(int dims, double duration, double interval, double range, double vel, Rng & rng)
{
  CubicPath path;
  path.interval        = interval;
  const Eigen::Index K = std::max<Eigen::Index>(2, Eigen::Index(std::ceil(duration / interval)) + 1);
  path.points.resize(dims, K);
  path.slopes.resize(dims, K);
  for (Eigen::Index k = 0; k < K; ++k) {
    for (int i = 0; i < dims; ++i) {
      path.points(i, k) = uniform(rng, -range, range);
      path.slopes(i, k) = uniform(rng, -vel, vel);
    }
  }
  return path;
}

/// Zero-order-hold discretization of (Ac, Bc) through the exponential of the augmented matrix.
inline std::pair<Matrix, Matrix> discretize(const Matrix & Ac, const Matrix & Bc, double dt)
{
  const Eigen::Index n = Ac.rows(), m = Bc.cols();
  Matrix M = Matrix::Zero(n + m, n + m);
  M.topLeftCorner(n, n)  = Ac * dt;
  M.topRightCorner(n, m) = Bc * dt;
  const Matrix E         = M.exp();
  return {E.topLeftCorner(n, n), E.topRightCorner(n, m)};
}

/// Infinite-horizon discrete LQR gain by fixed-point iteration of the Riccati equation.
inline Matrix dlqr(const Matrix & A, const Matrix & B, const Matrix & Q, const Matrix & R, int max_iter = 100000)
{
  Matrix P = Q;
  for (int it = 0; it < max_iter; ++it) {
    const Matrix BtP = B.transpose() * P;
    const Matrix K   = (R + BtP * B).ldlt().solve(BtP * A);
    const Matrix Pn  = Q + A.transpose() * P * (A - B * K);
    const double d   = (Pn - P).cwiseAbs().maxCoeff();
    P                = 0.5 * (Pn + Pn.transpose());
    if (d < 1e-10 * std::max(1.0, P.cwiseAbs().maxCoeff())) { break; }
  }
  const Matrix BtP = B.transpose() * P;
  return (R + BtP * B).ldlt().solve(BtP * A);
}

/// Hover linearization of the planar quadrotor, discretized at dt, with its LQR gain.
inline Matrix quadrotor_lqr_gain(const QuadrotorParams & p, double dt, const Vector & q, const Vector & r)
{
  Matrix Ac = Matrix::Zero(6, 6), Bc = Matrix::Zero(6, 2);
  Ac(0, 3) = Ac(1, 4) = Ac(2, 5) = 1;
  Ac(3, 2)                       = -p.g;
  Bc(4, 0) = Bc(4, 1) = 1 / p.m;
  Bc(5, 0)            = -p.l_arm / p.I;
  Bc(5, 1)            = p.l_arm / p.I;
  const auto [Ad, Bd] = discretize(Ac, Bc, dt);
  return dlqr(Ad, Bd, q.asDiagonal(), r.asDiagonal());
}

// ---------------------------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------------------------

namespace detail {

inline std::optional<Trajectory> simulate_candidate(const Plant & plant, const GenConfig & c, Rng & rng)
{
  const int n = plant.state_dim(), m = plant.input_dim(), N = c.snapshots;
  Trajectory tr{Matrix(n, N), Matrix(m, N), false};
  Vector x(n);
  const double duration = c.dt * N;

  std::function<Vector(double, const Vector &)> controller;
  switch (plant.id()) {
    case SystemId::pendulum: {
      for (int i = 0; i < n / 2; ++i) {
        x(2 * i)     = uniform(rng, c.theta_min, c.theta_max);
        x(2 * i + 1) = uniform(rng, c.thetadot_min, c.thetadot_max);
      }
      std::vector<double> amp(std::size_t(c.sinusoids)), freq(amp.size()), phase(amp.size());
      for (std::size_t k = 0; k < amp.size(); ++k) {
        amp[k]   = uniform(rng, 0, c.input_limit / 2);
        freq[k]  = std::exp(uniform(rng, std::log(c.freq_min), std::log(c.freq_max)));
        phase[k] = uniform(rng, 0, 2 * std::numbers::pi);
      }
      controller = [=](double t, const Vector &) {
        double u = 0;
        for (std::size_t k = 0; k < amp.size(); ++k) { u += amp[k] * std::sin(2 * std::numbers::pi * freq[k] * t + phase[k]); }
        return Vector::Constant(1, std::clamp(u, -c.input_limit, c.input_limit));
      };
      break;
    }
    case SystemId::manipulator: {
      const auto & p  = std::get<ManipulatorParams>(plant.params());
      const auto path = random_cubic_path(3, duration, c.waypoint_interval, c.position_range, c.velocity_range, rng);
      const auto s0   = path.eval(0);
      x << s0.q, s0.qd;
      controller = [&c, &rng, p, path](double t, const Vector & xs) {
        const auto s                = path.eval(t);
        const Eigen::Vector3d th    = xs.head<3>(), dth = xs.tail<3>();
        const Eigen::Vector3d accel = s.qdd + c.kd * (s.qd - dth) + c.kp * (s.q - th);
        Vector tau = manipulator_mass_matrix(th, p) * accel + manipulator_coriolis(th, dth, p)
                     + manipulator_gravity(th, p);
        for (int i = 0; i < 3; ++i) { tau(i) = std::clamp(tau(i) + gaussian(rng, c.excitation_std), -c.torque_limit, c.torque_limit); }
        return tau;
      };
      break;
    }
    case SystemId::quadrotor: {
      const auto & p  = std::get<QuadrotorParams>(plant.params());
      const auto path = random_cubic_path(2, duration, c.waypoint_interval, c.position_range, c.velocity_range, rng);
      const auto s0   = path.eval(0);
      x << s0.q(0), s0.q(1), 0, s0.qd(0), s0.qd(1), 0;
      const Matrix K = quadrotor_lqr_gain(p, c.dt, c.lqr_q, c.lqr_r);
      controller     = [&c, &rng, p, path, K](double t, const Vector & xs) {
        const auto s = path.eval(t);
        Vector ref(6);
        ref << s.q(0), s.q(1), 0, s.qd(0), s.qd(1), 0;
        Vector u = Vector::Constant(2, p.m * (p.g + s.qdd(1)) / 2) - K * (xs - ref);
        for (int i = 0; i < 2; ++i) { u(i) = std::clamp(u(i) + gaussian(rng, c.excitation_std), c.thrust_min, c.thrust_max); }
        return u;
      };
      break;
    }
  }

  for (int k = 0; k < N; ++k) {
    const double t = k * c.dt;
    tr.states.col(k) = x;
    tr.inputs.col(k) = controller(t, x);
    if (k + 1 == N) { break; }
    try {
      x = plant.step(x, tr.inputs.col(k), t, c.dt, k);
    } catch (const FaultError &) {
      return std::nullopt;
    }
    if (!x.allFinite() || x.norm() > c.divergence_guard) { return std::nullopt; }
  }
  return tr;
}

}  // namespace detail

/**
 * @brief Simulate `cfg.trajectories` nominal trajectories of `cfg.snapshots` samples each.
 *
 * Trajectory i draws from its own substream of cfg.seed, so results do not depend on how many
 * other trajectories were rejected. A fraction train_fraction (rounded) is marked as training,
 * chosen by a seeded permutation.
 */
inline SnapshotDataset generate_dataset(SystemId system, const GenConfig & cfg, SystemParams params)
{
  cfg.validate();
  if (cfg.trajectories == 0 || cfg.snapshots < 2) {
    throw ConfigError("generate: request produces an empty dataset (need trajectories >= 1, snapshots >= 2)");
  }
  const Plant plant(std::move(params), {}, cfg.substeps);
  if (plant.id() != system) { throw ConfigError("generate: parameters belong to a different system"); }

  SnapshotDataset ds;
  ds.system = system;
  ds.n      = plant.state_dim();
  ds.m      = plant.input_dim();
  ds.dt     = cfg.dt;
  ds.seed   = cfg.seed;
  for (int i = 0; i < cfg.trajectories; ++i) {
    Rng rng = substream(cfg.seed, std::uint64_t(i));
    std::optional<Trajectory> tr;
    for (int attempt = 0; attempt <= cfg.max_resample && !tr; ++attempt) {
      tr = detail::simulate_candidate(plant, cfg, rng);
      if (!tr) { ++ds.rejected; }
    }
    if (!tr) {
      throw FaultError("generate: trajectory " + std::to_string(i) + " diverged " + std::to_string(cfg.max_resample + 1)
                       + " times");
    }
    ds.trajectories.push_back(std::move(*tr));
  }

  std::vector<std::size_t> order(ds.trajectories.size());
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng = substream(cfg.seed, 0x5b117ULL);
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n_train = std::size_t(std::lround(cfg.train_fraction * double(order.size())));
  for (std::size_t k = n_train; k < order.size(); ++k) { ds.trajectories[order[k]].validation = true; }
  return ds;
}

inline SnapshotDataset generate_dataset(SystemId system, const GenConfig & cfg)
{
  return generate_dataset(system, cfg, default_params(system));
}

// ---------------------------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------------------------

inline constexpr int kDatasetFormatVersion = 1;

inline void write_dataset(const SnapshotDataset & ds, const std::filesystem::path & dir)
{
  std::filesystem::create_directories(dir);
  std::vector<std::string> header{"t"};
  for (int i = 0; i < ds.n; ++i) { header.push_back("x_" + std::to_string(i)); }
  for (int i = 0; i < ds.m; ++i) { header.push_back("u_" + std::to_string(i)); }

  Json files = Json::array();
  for (std::size_t k = 0; k < ds.trajectories.size(); ++k) {
    const auto & tr = ds.trajectories[k];
    std::ostringstream name;
    name << "traj_" << std::setw(4) << std::setfill('0') << k << ".csv";
    CsvWriter w(dir / name.str(), header);
    for (Eigen::Index j = 0; j < tr.snapshots(); ++j) {
      std::vector<std::string> row{format_double(double(j) * ds.dt)};
      for (int i = 0; i < ds.n; ++i) { row.push_back(format_double(tr.states(i, j))); }
      for (int i = 0; i < ds.m; ++i) { row.push_back(format_double(tr.inputs(i, j))); }
      w.row(row);
    }
    files.push_back({{"file", name.str()}, {"split", tr.validation ? "validation" : "train"}});
  }
  const Json manifest{
    {"format_version", kDatasetFormatVersion},
    {"system", to_string(ds.system)},
    {"n", ds.n},
    {"m", ds.m},
    {"dt", ds.dt},
    {"seed", ds.seed},
    {"rejected", ds.rejected},
    {"counts", {{"trajectories", ds.trajectories.size()}, {"train", ds.count(false)}, {"validation", ds.count(true)}}},
    {"trajectories", files},
  };
  write_json_file(manifest, dir / "manifest.json");
}

inline SnapshotDataset read_dataset(const std::filesystem::path & dir)
{
  Json j;
  try {
    j = read_json_file(dir / "manifest.json");
  } catch (const ConfigError & e) {
    throw SchemaError(std::string("dataset: ") + e.what());
  }
  SnapshotDataset ds;
  try {
    if (j.at("format_version").get<int>() != kDatasetFormatVersion) {
      throw SchemaError("dataset: unsupported format_version");
    }
    ds.system   = system_from_string(j.at("system").get<std::string>());
    ds.n        = j.at("n").get<int>();
    ds.m        = j.at("m").get<int>();
    ds.dt       = j.at("dt").get<double>();
    ds.seed     = j.at("seed").get<std::uint64_t>();
    ds.rejected = j.value("rejected", 0);
    for (const auto & f : j.at("trajectories")) {
      const auto table = read_csv(dir / f.at("file").get<std::string>());
      if (table.header.size() != std::size_t(1 + ds.n + ds.m)) {
        throw SchemaError("dataset: " + f.at("file").get<std::string>() + " has the wrong column count");
      }
      Trajectory tr{Matrix(ds.n, Eigen::Index(table.rows.size())), Matrix(ds.m, Eigen::Index(table.rows.size())),
                    f.at("split").get<std::string>() == "validation"};
      for (std::size_t r = 0; r < table.rows.size(); ++r) {
        for (int i = 0; i < ds.n; ++i) { tr.states(i, Eigen::Index(r)) = table.num(r, std::size_t(1 + i)); }
        for (int i = 0; i < ds.m; ++i) { tr.inputs(i, Eigen::Index(r)) = table.num(r, std::size_t(1 + ds.n + i)); }
      }
      ds.trajectories.push_back(std::move(tr));
    }
  } catch (const Json::exception & e) {
    throw SchemaError(std::string("dataset manifest: ") + e.what());
  } catch (const ConfigError & e) {
    throw SchemaError(std::string("dataset manifest: ") + e.what());
  }
  return ds;
}

// ---------------------------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------------------------

struct ArchConfig
{
  ModelMode mode = ModelMode::linear;
  int lifted_dim = 17;
  std::vector<Eigen::Index> hidden{40, 40};
  bool constant_channel = true;
};

struct TrainConfig
{
  double alpha1 = 1.0, alpha2 = 0.4, alpha3 = 1.0;  ///< reconstruction, prediction, lifting weights
  double gamma1 = 1e-5, gamma2 = 1e-5;              ///< L1 and squared-L2 weight penalties
  int batch     = 256;
  int epochs    = 200;
  int patience  = 20;  ///< early stopping on validation prediction loss; <= 0 disables
  AdamConfig adam;
  std::uint64_t seed       = 0;
  bool least_squares_refit = true;  ///< closed-form (A, B) for the current lifting, see refit_every
  int refit_every          = 1;     ///< epochs between refits (0: only after the last epoch)
  bool normalize_inputs    = true;  ///< standardize the network input with training-set moments
  int restarts             = 1;     ///< independent runs from seeds seed, seed + 1, ...; the lowest validation loss is kept

  void validate() const
  {
    for (double w : {alpha1, alpha2, alpha3, gamma1, gamma2}) {
      if (!(w >= 0)) { throw ConfigError("train: loss weights must be >= 0"); }
    }
    if (batch < 1) { throw ConfigError("train: batch must be >= 1"); }
    if (epochs < 0) { throw ConfigError("train: epochs must be >= 0"); }
    if (!(adam.lr > 0)) { throw ConfigError("train: learning rate must be > 0"); }
    if (refit_every < 0) { throw ConfigError("train: refit_every must be >= 0"); }
    if (restarts < 1) { throw ConfigError("train: restarts must be >= 1"); }
  }
};

inline void arch_from_json(const Json & j, ArchConfig & a, TrainConfig & t)
{
  check_keys(j, {"mode", "lifted_dim", "hidden", "constant_channel", "train", "system"}, "arch config");
  a.mode             = mode_from_string(get_or<std::string>(j, "mode", to_string(a.mode)));
  a.lifted_dim       = get_or(j, "lifted_dim", a.lifted_dim);
  a.hidden           = get_or(j, "hidden", a.hidden);
  a.constant_channel = get_or(j, "constant_channel", a.constant_channel);
  if (j.contains("train")) {
    const auto & tj = j.at("train");
    check_keys(tj,
               {"alpha", "gamma", "batch", "epochs", "patience", "lr", "adam_beta1", "adam_beta2", "adam_eps", "seed",
                "least_squares_refit", "refit_every", "normalize_inputs", "restarts"},
               "arch config 'train'");
    const auto alpha = get_or<std::vector<double>>(tj, "alpha", {t.alpha1, t.alpha2, t.alpha3});
    const auto gamma = get_or<std::vector<double>>(tj, "gamma", {t.gamma1, t.gamma2});
    if (alpha.size() != 3 || gamma.size() != 2) { throw ConfigError("train: alpha needs 3 and gamma 2 entries"); }
    t.alpha1 = alpha[0];
    t.alpha2 = alpha[1];
    t.alpha3 = alpha[2];
    t.gamma1 = gamma[0];
    t.gamma2 = gamma[1];
    t.batch               = get_or(tj, "batch", t.batch);
    t.epochs              = get_or(tj, "epochs", t.epochs);
    t.patience            = get_or(tj, "patience", t.patience);
    t.adam.lr             = get_or(tj, "lr", t.adam.lr);
    t.adam.beta1          = get_or(tj, "adam_beta1", t.adam.beta1);
    t.adam.beta2          = get_or(tj, "adam_beta2", t.adam.beta2);
    t.adam.eps            = get_or(tj, "adam_eps", t.adam.eps);
    t.seed                = get_or(tj, "seed", t.seed);
    t.least_squares_refit = get_or(tj, "least_squares_refit", t.least_squares_refit);
    t.refit_every         = get_or(tj, "refit_every", t.refit_every);
    t.normalize_inputs    = get_or(tj, "normalize_inputs", t.normalize_inputs);
    t.restarts            = get_or(tj, "restarts", t.restarts);
  }
  t.validate();
}

struct NominalLosses
{
  double rec = 0, pred = 0, lift = 0, reg = 0;

  double total(const TrainConfig & c) const { return c.alpha1 * rec + c.alpha2 * pred + c.alpha3 * lift + reg; }
};

struct ModelGradients
{
  Matrix A, B;
  MlpGradients net;
};

/// Input regressor for a batch: U (linear) or the column-wise kron(z, u) (bilinear).
inline Matrix regressor_batch(const KoopmanModel & model, const Matrix & Z, const Matrix & U)
{
  if (model.mode == ModelMode::linear) { return U; }
  Matrix V(Z.rows() * U.rows(), Z.cols());
  for (Eigen::Index b = 0; b < Z.cols(); ++b) { V.col(b) = kron(Z.col(b), U.col(b)); }
  return V;
}

namespace detail {

inline double l1(const Matrix & M) { return M.cwiseAbs().sum(); }

inline Matrix sign(const Matrix & M)
{
  return M.unaryExpr([](double v) { return double((v > 0) - (v < 0)); });
}

/// Pins the constant channel: its row of A is e_{p-1}^T and its row of B is zero.
inline void pin_constant_channel(KoopmanModel & model)
{
  if (!model.constant_channel) { return; }
  model.A.row(model.p - 1).setZero();
  model.A(model.p - 1, model.p - 1) = 1.0;
  model.B.row(model.p - 1).setZero();
}

}  // namespace detail

/// Batch-averaged squared-norm losses; fills gradients of the weighted total when `grad` is given.
inline NominalLosses nominal_losses(
  const KoopmanModel & model, const SnapshotBatch & batch, const TrainConfig & cfg = {}, ModelGradients * grad = nullptr)
{
  const double N = double(std::max<Eigen::Index>(batch.size(), 1));
  const int n = model.n, f = model.lifted_features();
  Tape tx, ty;
  const Matrix Z  = lift_batch(model, batch.X, grad ? &tx : nullptr);
  const Matrix Zy = lift_batch(model, batch.Y, grad ? &ty : nullptr);
  const Matrix V  = regressor_batch(model, Z, batch.U);
  const Matrix Zh = model.A * Z + model.B * V;

  const Matrix Rp = Zh.topRows(n) - batch.Y;
  const Matrix Rl = Zh - Zy;
  NominalLosses L;
  L.rec  = (batch.X - Z.topRows(n)).squaredNorm() / N;
  L.pred = Rp.squaredNorm() / N;
  L.lift = Rl.squaredNorm() / N;
  L.reg  = cfg.gamma1 * (detail::l1(model.A) + detail::l1(model.B)) + cfg.gamma2 * (model.A.squaredNorm() + model.B.squaredNorm());
  for (const auto & W : model.lifting_net.weights) { L.reg += cfg.gamma1 * detail::l1(W) + cfg.gamma2 * W.squaredNorm(); }
  if (!grad) { return L; }

  Matrix G = (2 * cfg.alpha3 / N) * Rl;
  G.topRows(n) += (2 * cfg.alpha2 / N) * Rp;
  grad->A = G * Z.transpose() + cfg.gamma1 * detail::sign(model.A) + 2 * cfg.gamma2 * model.A;
  grad->B = G * V.transpose() + cfg.gamma1 * detail::sign(model.B) + 2 * cfg.gamma2 * model.B;
  if (f == 0) {
    grad->net = {};
    return L;
  }
  Matrix dZ = model.A.transpose() * G;
  if (model.mode == ModelMode::bilinear) {
    const Matrix dV = model.B.transpose() * G;
    for (Eigen::Index i = 0; i < model.p; ++i) {
      for (int j = 0; j < model.m; ++j) { dZ.row(i).array() += dV.row(i * model.m + j).array() * batch.U.row(j).array(); }
    }
  }
  const Matrix dZy = (-2 * cfg.alpha3 / N) * Rl;
  grad->net        = backward(model.lifting_net, tx, dZ.middleRows(n, f));
  const auto gy    = backward(model.lifting_net, ty, dZy.middleRows(n, f));
  for (std::size_t l = 0; l < grad->net.weights.size(); ++l) {
    const Matrix & W = model.lifting_net.weights[l];
    grad->net.weights[l] += gy.weights[l] + cfg.gamma1 * detail::sign(W) + 2 * cfg.gamma2 * W;
    grad->net.biases[l] += gy.biases[l];
  }
  return L;
}

/// Untrained model for the dataset: A = 0 (identity on the constant channel), B = 0, network input
/// standardized on the training split.
inline KoopmanModel init_model(const SnapshotDataset & ds, const ArchConfig & arch, const TrainConfig & cfg)
{
  Rng rng  = substream(cfg.seed, 0x1417ULL);
  auto mdl = make_model(arch.mode, ds.n, ds.m, arch.lifted_dim, arch.hidden, arch.constant_channel, rng);
  if (cfg.normalize_inputs) {
    const Matrix X = ds.stack(false).X;
    if (X.cols() > 0) {
      mdl.input_offset = X.rowwise().mean();
      const Vector sd  = ((X.colwise() - mdl.input_offset).array().square().rowwise().mean()).sqrt();
      mdl.input_scale  = sd.unaryExpr([](double s) { return s > 1e-12 ? 1.0 / s : 1.0; });
    }
  }
  return mdl;
}

/// Closed-form [A B] for the current lifting: every lifted row is a ridge regression of lift(y) on
/// [z; v]. The first n rows of lift(y) are y itself, so this minimizes both prediction terms.
inline void refit_least_squares(KoopmanModel & model, const SnapshotBatch & data, double ridge)
{
  const Matrix Z  = lift_batch(model, data.X);
  const Matrix Zy = lift_batch(model, data.Y);
  Matrix W(model.p + model.b_cols(), Z.cols());
  W << Z, regressor_batch(model, Z, data.U);
  Matrix K;
  if (ridge > 0) {
    Matrix G = W * W.transpose();
    G.diagonal().array() += ridge;
    K = G.ldlt().solve(W * Zy.transpose()).transpose();
  } else {
    K = W.transpose().completeOrthogonalDecomposition().solve(Zy.transpose()).transpose();
  }
  model.A = K.leftCols(model.p);
  model.B = K.rightCols(model.b_cols());
  detail::pin_constant_channel(model);
}

struct TrainReport
{
  std::vector<double> train_loss;  ///< mean weighted total loss per epoch
  std::vector<double> val_pred;    ///< validation prediction loss after each epoch
  double val_pred_init  = 0;
  double val_pred_final = 0;
  int best_epoch        = -1;
  bool early_stopped    = false;
  bool refit_accepted   = false;
  int restart           = 0;  ///< index of the kept run when restarts > 1
};

/**
 * @brief Offline Adam training of lifting network and (A, B) on the composite loss.
 *
 * Training is sequential and reproducible for a given (dataset, arch, config). The parameters
 * with the lowest validation prediction loss are returned; with cfg.restarts > 1 the same rule picks
 * among the independent runs. Throws FaultError on a non-finite loss.
 */
inline KoopmanModel train_nominal(
  const SnapshotDataset & ds, const ArchConfig & arch, const TrainConfig & cfg, TrainReport * report = nullptr);

namespace detail {

inline KoopmanModel train_single(const SnapshotDataset & ds, const ArchConfig & arch, const TrainConfig & cfg,
                                 TrainReport * report)
{
  KoopmanModel model = init_model(ds, arch, cfg);
  TrainReport rep;
  const SnapshotBatch train = ds.stack(false);
  SnapshotBatch val         = ds.stack(true);
  if (train.size() == 0) { throw ConfigError("train: dataset has no training pairs"); }
  if (val.size() == 0) { val = train; }

  auto val_loss = [&](const KoopmanModel & m) { return nominal_losses(m, val, cfg).pred; };
  rep.val_pred_init = val_loss(model);
  rep.val_pred_final = rep.val_pred_init;
  if (cfg.epochs == 0) {
    if (report) { *report = rep; }
    return model;
  }

  Rng rng = substream(cfg.seed, 0x7a11ULL);
  AdamState adam;
  adam.cfg = cfg.adam;
  std::vector<Eigen::Index> order(std::size_t(train.size()));
  std::iota(order.begin(), order.end(), 0);

  const double ridge = cfg.alpha3 > 0 ? double(train.size()) * cfg.gamma2 / cfg.alpha3 : 0.0;
  KoopmanModel best  = model;
  double best_val    = rep.val_pred_init;
  int stale          = 0;
  ModelGradients g;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.least_squares_refit && cfg.refit_every > 0 && epoch % cfg.refit_every == 0) {
      refit_least_squares(model, train, ridge);
    }
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += std::size_t(cfg.batch)) {
      const auto len = std::min(order.size() - start, std::size_t(cfg.batch));
      const auto b   = gather(train, std::span<const Eigen::Index>(order.data() + start, len));
      const auto L   = nominal_losses(model, b, cfg, &g);
      const double total = L.total(cfg);
      if (!std::isfinite(total)) {
        throw FaultError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches)
                         + " (pred " + format_double(L.pred) + ", lift " + format_double(L.lift) + ", reg "
                         + format_double(L.reg) + ")");
      }
      auto blocks = param_blocks(model.lifting_net, g.net);
      blocks.push_back({model.A.data(), g.A.data(), model.A.size()});
      blocks.push_back({model.B.data(), g.B.data(), model.B.size()});
      adam_step(blocks, adam);
      detail::pin_constant_channel(model);
      sum += total;
      ++batches;
    }
    rep.train_loss.push_back(sum / batches);
    const double v = val_loss(model);
    rep.val_pred.push_back(v);
    if (v < best_val) {
      best_val       = v;
      best           = model;
      rep.best_epoch = epoch;
      stale          = 0;
    } else if (cfg.patience > 0 && ++stale >= cfg.patience) {
      rep.early_stopped = true;
      break;
    }
  }
  model = best;

  if (cfg.least_squares_refit) {
    KoopmanModel refit = model;
    refit_least_squares(refit, train, ridge);
    const double v = val_loss(refit);
    if (std::isfinite(v) && v <= best_val) {
      model              = refit;
      best_val           = v;
      rep.refit_accepted = true;
    }
  }
  rep.val_pred_final = best_val;
  if (!model.has_identity_projection()) { throw std::logic_error("train: projection structure lost"); }
  if (report) { *report = std::move(rep); }
  return model;
}

}  // namespace detail

inline KoopmanModel train_nominal(
  const SnapshotDataset & ds, const ArchConfig & arch, const TrainConfig & cfg, TrainReport * report)
{
  cfg.validate();
  KoopmanModel best;
  TrainReport best_rep;
  for (int r = 0; r < cfg.restarts; ++r) {
    TrainConfig c = cfg;
    c.seed        = cfg.seed + std::uint64_t(r);
    TrainReport rep;
    KoopmanModel m = detail::train_single(ds, arch, c, &rep);
    if (r == 0 || rep.val_pred_final < best_rep.val_pred_final) {
      best     = std::move(m);
      best_rep = std::move(rep);
      best_rep.restart = r;
    }
  }
  if (report) { *report = std::move(best_rep); }
  return best;
}

// ---------------------------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------------------------

struct PredictionReport
{
  std::vector<double> rmse;  ///< per trajectory
  double mean = 0, max = 0;
};

/// Open-loop h-step prediction RMSE in the base state, from every start index of each trajectory.
inline PredictionReport evaluate_model(const KoopmanModel & model, const SnapshotDataset & ds, int horizon, bool validation = true)
{
  if (horizon < 1) { throw ConfigError("evaluate: horizon must be >= 1"); }
  PredictionReport r;
  for (const auto & tr : ds.trajectories) {
    if (tr.validation != validation || tr.snapshots() <= horizon) { continue; }
    const Eigen::Index starts = tr.snapshots() - horizon;
    Matrix Z = lift_batch(model, tr.states.leftCols(starts));
    for (int h = 0; h < horizon; ++h) {
      Z = model.A * Z + model.B * regressor_batch(model, Z, tr.inputs.middleCols(h, starts));
    }
    const double mse = (Z.topRows(model.n) - tr.states.middleCols(horizon, starts)).squaredNorm() / double(starts * model.n);
    r.rmse.push_back(std::sqrt(mse));
  }
  if (!r.rmse.empty()) {
    r.mean = std::accumulate(r.rmse.begin(), r.rmse.end(), 0.0) / double(r.rmse.size());
    r.max  = *std::max_element(r.rmse.begin(), r.rmse.end());
  }
  return r;
}

}  // namespace akmpc
