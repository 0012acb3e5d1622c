#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "akmpc/harness.hpp"
#include "akmpc/offline.hpp"

using namespace akmpc;

namespace {

/// Small least-squares fitted pendulum model (no gradient training), shared by the loop tests.
const KoopmanModel & pendulum_model()
{
  static const KoopmanModel model = [] {
    GenConfig g    = GenConfig::defaults(SystemId::pendulum);
    g.trajectories = 8;
    g.snapshots    = 200;
    g.seed         = 3;
    const auto ds  = generate_dataset(SystemId::pendulum, g);
    ArchConfig arch;
    arch.hidden = {16};
    TrainConfig tc;
    KoopmanModel m = init_model(ds, arch, tc);
    refit_least_squares(m, ds.stack(false), 1e-6);
    return m;
  }();
  return model;
}

ExperimentConfig short_pendulum(RunMode mode)
{
  ExperimentConfig c = default_experiment(SystemId::pendulum);
  c.mode             = mode;
  c.duration         = 0.2;
  c.mpc.horizon      = 5;
  c.seed             = 11;
  return c;
}

std::filesystem::path temp_path(const std::string & name)
{
  return std::filesystem::temp_directory_path() / ("akmpc_harness_" + name);
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// References
// ---------------------------------------------------------------------------------------------

TEST(Reference, ConstantVelocityStartsAtInitialAngles)
{
  ReferenceSpec r;
  r.velocity = 40;
  Vector x0  = Vector::Zero(10);
  x0(4)      = 0.3;
  const Vector x = reference_at(r, 0.25, SystemId::pendulum, 10, x0);
  for (int i = 0; i < 5; ++i) {
    EXPECT_DOUBLE_EQ(x(2 * i), x0(2 * i) + 10.0);
    EXPECT_DOUBLE_EQ(x(2 * i + 1), 40.0);
  }
}

TEST(Reference, SinusoidJoints)
{
  ReferenceSpec r;
  r.kind      = ReferenceSpec::Kind::sinusoid_joints;
  r.amplitude = Vector::Constant(1, 0.5);
  r.omega     = (Vector(3) << 1, 2, 3).finished();
  const double t = 0.7;
  const Vector x = reference_at(r, t, SystemId::manipulator, 6, Vector::Zero(6));
  for (int i = 0; i < 3; ++i) {
    const double w = i + 1.0;
    EXPECT_NEAR(x(i), 0.5 * std::sin(w * t), 1e-15);
    EXPECT_NEAR(x(3 + i), 0.5 * w * std::cos(w * t), 1e-15);
  }
}

TEST(Reference, LemniscateStartAndInitialVelocity)
{
  ReferenceSpec r = default_reference(SystemId::quadrotor);
  r.scale         = 2;
  r.period        = 10;
  const Vector x  = reference_at(r, 0.0, SystemId::quadrotor, 6, Vector::Zero(6));
  EXPECT_NEAR(x(0), 2.0, 1e-12);
  EXPECT_NEAR(x(1), 0.0, 1e-12);
  // dy/ds = 0 and dz/ds = a at s = 0, with ds/dt = 2 pi / T
  EXPECT_NEAR(x(3), 0.0, 1e-4);
  EXPECT_NEAR(x(4), 2.0 * 2 * std::numbers::pi / 10, 1e-4);
  EXPECT_EQ(x(2), 0.0);
  EXPECT_EQ(x(5), 0.0);
}

TEST(Reference, PathShapesArePeriodicAndBounded)
{
  for (const char * shape : {"lemniscate", "s-shape", "hypotrochoid"}) {
    ReferenceSpec r = default_reference(SystemId::quadrotor);
    r.shape         = shape;
    r.center        = (Vector(2) << 1, -1).finished();
    const auto p0 = path_point(r, 0.0), pT = path_point(r, r.period);
    EXPECT_LT((p0 - pT).norm(), 1e-9) << shape;
    for (double t = 0; t < r.period; t += 0.01) {
      const Eigen::Vector2d p = path_point(r, t) - Eigen::Vector2d(1, -1);
      EXPECT_LE(p.norm(), r.scale * (1 + 1e-9)) << shape;
    }
  }
}

TEST(Reference, VelocityMatchesPositionDifference)
{
  ReferenceSpec r = default_reference(SystemId::quadrotor);
  r.shape         = "hypotrochoid";
  const double t = 1.3, h = 1e-4;
  const Vector a = reference_at(r, t - h, SystemId::quadrotor, 6, Vector::Zero(6));
  const Vector b = reference_at(r, t + h, SystemId::quadrotor, 6, Vector::Zero(6));
  const Vector x = reference_at(r, t, SystemId::quadrotor, 6, Vector::Zero(6));
  EXPECT_NEAR(x(3), (b(0) - a(0)) / (2 * h), 1e-5);
  EXPECT_NEAR(x(4), (b(1) - a(1)) / (2 * h), 1e-5);
}

TEST(Reference, RejectsBadInput)
{
  ReferenceSpec r;
  EXPECT_THROW(reference_at(r, -1.0, SystemId::pendulum, 10, Vector::Zero(10)), ConfigError);
  r.kind = ReferenceSpec::Kind::path_shape;
  EXPECT_THROW(reference_at(r, 0.0, SystemId::pendulum, 10, Vector::Zero(10)), ConfigError);
  EXPECT_THROW(reference_from_json(Json{{"kind", "path_shape"}, {"shape", "circle"}}), ConfigError);
}

// ---------------------------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------------------------

TEST(Metrics, HandComputedErrors)
{
  Trace tr;
  tr.system = SystemId::quadrotor;
  tr.n      = 6;
  tr.m      = 2;
  tr.x      = Matrix::Zero(6, 2);
  tr.x_ref  = Matrix::Zero(6, 2);
  tr.x_obs  = tr.x;
  tr.u      = Matrix::Zero(2, 2);
  tr.x_ref(0, 0) = 2;
  tr.x(0, 0)     = 1;  // relative error 0.5
  tr.x_ref(1, 1) = 4;
  tr.x(1, 1)     = 1;  // relative error 0.75
  tr.x(0, 1)     = 3;  // ref 0 here: skipped in e_theta, counted in RMS
  tr.step        = {0, 1};
  tr.t           = {0, 0.01};
  tr.solve_status = {"solved", "degraded"};
  tr.solve_ms    = {1, 3};
  tr.adapt_ms    = {0.5, 0.5};
  tr.dA_fro = tr.dB_fro = {0, 0};
  const auto r = compute_metrics(tr, 10);
  EXPECT_NEAR(r.e_theta, (0.5 + 0.75) / 2, 1e-15);
  EXPECT_NEAR(r.rms(0), std::sqrt((1 + 9) / 2.0), 1e-15);
  EXPECT_NEAR(r.rms(1), std::sqrt(9 / 2.0), 1e-15);
  EXPECT_NEAR(r.rms_theta, std::sqrt((1 + 9 + 9) / 4.0), 1e-15);
  EXPECT_NEAR(r.mean_position_error, (1 + std::sqrt(9.0 + 9.0)) / 2, 1e-15);
  EXPECT_DOUBLE_EQ(r.mean_step_ms, 2.5);
  EXPECT_DOUBLE_EQ(r.max_step_ms, 3.5);
  EXPECT_EQ(r.degraded_steps, 1);
  EXPECT_TRUE(r.real_time);
  EXPECT_DOUBLE_EQ(improvement_pct(2.0, 0.5), 75.0);
}

TEST(Metrics, TimingQuantiles)
{
  Trace tr;
  for (int k = 0; k < 5; ++k) {
    tr.t.push_back(k);
    tr.solve_ms.push_back(k + 1);
    tr.adapt_ms.push_back(0);
  }
  const auto s = timing_report({&tr});
  EXPECT_EQ(s.samples, 5);
  EXPECT_DOUBLE_EQ(s.mean, 3);
  EXPECT_DOUBLE_EQ(s.p25, 2);
  EXPECT_DOUBLE_EQ(s.p50, 3);
  EXPECT_DOUBLE_EQ(s.max, 5);
}

// ---------------------------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------------------------

TEST(ExperimentConfig, DefaultsPerSystem)
{
  const auto p = default_experiment(SystemId::pendulum);
  EXPECT_EQ(p.adapt.window, 4);
  EXPECT_EQ(p.adapt.epochs, 2);
  EXPECT_DOUBLE_EQ(p.mpc.u_max(0), 0.2);
  EXPECT_EQ(p.steps(), 500);
  const auto m = default_experiment(SystemId::manipulator);
  EXPECT_EQ(m.adapt.window, 10);
  EXPECT_DOUBLE_EQ(m.adapt.beta3, 0.01);
  const auto q = default_experiment(SystemId::quadrotor);
  EXPECT_DOUBLE_EQ(q.adapt.beta4, 1.0);
  EXPECT_DOUBLE_EQ(q.mpc.u_min(1), 0.0);
}

TEST(ExperimentConfig, JsonRoundTrip)
{
  ExperimentConfig c       = default_experiment(SystemId::quadrotor);
  c.uncertainty.mass_pct   = 20;
  c.uncertainty.overrides  = {{"I", 1.2}};
  c.wind                   = {2.0, 0.5, 0.1};
  c.snr_db                 = 30;
  c.reference.shape        = "s-shape";
  c.seed                   = 77;
  const auto j             = experiment_to_json(c);
  const auto back          = experiment_from_json(j);
  EXPECT_EQ(experiment_to_json(back), j);
  EXPECT_DOUBLE_EQ(back.wind.v_w, 2.0);
  EXPECT_EQ(back.reference.shape, "s-shape");
}

TEST(ExperimentConfig, RejectsBadValues)
{
  EXPECT_THROW(experiment_from_json(Json{{"system", "pendulum"}, {"bogus", 1}}), ConfigError);
  EXPECT_THROW(experiment_from_json(Json{{"duration", 1}}), ConfigError);
  EXPECT_THROW(experiment_from_json(Json{{"system", "pendulum"}, {"rate", 0}}), ConfigError);
  EXPECT_THROW(experiment_from_json(Json{{"system", "pendulum"}, {"duration", 0.123}}), ConfigError);
  EXPECT_THROW(experiment_from_json(Json{{"system", "pendulum"}, {"mode", "fast"}}), ConfigError);
}

TEST(ExperimentConfig, EpisodeParamsApplyUncertainty)
{
  ExperimentConfig c     = default_experiment(SystemId::quadrotor);
  c.uncertainty.mass_pct = 20;
  c.wind.v_w             = 3;
  auto q                 = std::get<QuadrotorParams>(episode_params(c));
  EXPECT_DOUBLE_EQ(q.m, 2.4);
  EXPECT_DOUBLE_EQ(q.v_w, 3);
  c.uncertainty.overrides = {{"m", 1.5}};
  EXPECT_DOUBLE_EQ(std::get<QuadrotorParams>(episode_params(c)).m, 1.5);

  ExperimentConfig p      = default_experiment(SystemId::pendulum);
  p.uncertainty.delta_pct = 40;
  const auto pp           = std::get<PendulumChainParams>(episode_params(p));
  const PendulumChainParams nom;
  for (auto [a, b] : {std::pair{pp.m, nom.m}, {pp.l, nom.l}, {pp.I, nom.I}, {pp.kappa, nom.kappa}}) {
    const double ratio = a / b;
    EXPECT_TRUE(std::abs(ratio - 1.4) < 1e-12 || std::abs(ratio - 0.6) < 1e-12);
  }
  EXPECT_DOUBLE_EQ(pp.g, nom.g);
}

TEST(ExperimentConfig, InitialStateDefaultsToReferenceStart)
{
  ExperimentConfig p = default_experiment(SystemId::pendulum);
  const Vector x0    = episode_initial_state(p, 10);
  for (int i = 0; i < 5; ++i) {
    EXPECT_DOUBLE_EQ(x0(2 * i), 0.0);
    EXPECT_DOUBLE_EQ(x0(2 * i + 1), 40.0);
  }
  ExperimentConfig m = default_experiment(SystemId::manipulator);
  EXPECT_TRUE(episode_initial_state(m, 6).isApprox((Vector(6) << 0, 0, 0, 1, 1, 1).finished()));
  ExperimentConfig q = default_experiment(SystemId::quadrotor);
  EXPECT_NEAR(episode_initial_state(q, 6)(0), 2.0, 1e-12);
  m.initial_state = Vector::Constant(6, 0.5);
  EXPECT_EQ(episode_initial_state(m, 6), m.initial_state);
}

// ---------------------------------------------------------------------------------------------
// Closed loop
// ---------------------------------------------------------------------------------------------

TEST(ClosedLoop, DeterministicForASeed)
{
  auto c   = short_pendulum(RunMode::adaptive);
  c.snr_db = 30;
  const auto a = run_closed_loop(c, pendulum_model());
  const auto b = run_closed_loop(c, pendulum_model());
  ASSERT_EQ(a.trace.size(), c.steps());
  EXPECT_EQ(0, std::memcmp(a.trace.x.data(), b.trace.x.data(), sizeof(double) * std::size_t(a.trace.x.size())));
  EXPECT_EQ(0, std::memcmp(a.trace.u.data(), b.trace.u.data(), sizeof(double) * std::size_t(a.trace.u.size())));
}

TEST(ClosedLoop, AdaptiveEqualsNominalUntilWindowFills)
{
  auto nom   = short_pendulum(RunMode::nominal);
  auto ada   = short_pendulum(RunMode::adaptive);
  nom.snr_db = ada.snr_db = 30;
  nom.uncertainty.delta_pct = ada.uncertainty.delta_pct = 40;
  const auto a = run_closed_loop(nom, pendulum_model());
  const auto b = run_closed_loop(ada, pendulum_model());
  // Same realization of plant and noise; the delta is zero for the first window - 1 updates
  const int w = ada.adapt.window;
  for (int k = 0; k < w - 1; ++k) {
    EXPECT_EQ(a.trace.x_obs.col(k), b.trace.x_obs.col(k)) << k;
    EXPECT_EQ(a.trace.u.col(k), b.trace.u.col(k)) << k;
    EXPECT_EQ(b.trace.dA_fro[std::size_t(k)], 0.0);
  }
  EXPECT_GT(b.trace.dA_fro.back() + b.trace.dB_fro.back(), 0.0);
  EXPECT_EQ(b.adapt_log.size(), std::size_t(ada.steps()));
  EXPECT_TRUE(a.adapt_log.empty());
}

TEST(ClosedLoop, NoiseFreeObservationEqualsState)
{
  const auto r = run_closed_loop(short_pendulum(RunMode::nominal), pendulum_model());
  EXPECT_EQ(r.trace.x, r.trace.x_obs);
  for (long k = 0; k < r.trace.size(); ++k) {
    EXPECT_LE(r.trace.u.col(k).cwiseAbs().maxCoeff(), 0.2 + 1e-9);
  }
}

TEST(ClosedLoop, RejectsMismatchedModel)
{
  auto c   = short_pendulum(RunMode::nominal);
  c.system = SystemId::manipulator;
  c.mpc    = default_mpc_config(SystemId::manipulator);
  c.reference = default_reference(SystemId::manipulator);
  EXPECT_THROW(run_closed_loop(c, pendulum_model()), DimensionError);
}

TEST(ClosedLoop, DivergenceGuardStopsEarly)
{
  auto c             = short_pendulum(RunMode::nominal);
  c.initial_state    = Vector::Constant(10, 5.0);
  c.divergence_guard = 1.0;
  const auto r       = run_closed_loop(c, pendulum_model());
  EXPECT_TRUE(r.metrics.diverged);
  EXPECT_EQ(r.trace.size(), 0);
  EXPECT_FALSE(r.fault.empty());
}

TEST(ClosedLoop, TraceFileRoundTrip)
{
  auto c       = short_pendulum(RunMode::adaptive);
  const auto r = run_closed_loop(c, pendulum_model());
  const auto p = temp_path("trace.csv");
  write_trace(r.trace, p);
  const Trace back = read_trace(p);
  EXPECT_EQ(back.system, SystemId::pendulum);
  EXPECT_EQ(back.x, r.trace.x);
  EXPECT_EQ(back.u, r.trace.u);
  EXPECT_EQ(back.solve_status, r.trace.solve_status);
  EXPECT_EQ(back.dA_fro, r.trace.dA_fro);
  const auto m = compute_metrics(back);
  EXPECT_DOUBLE_EQ(m.e_theta, r.metrics.e_theta);
  std::filesystem::remove(p);
}

TEST(ClosedLoop, ReadTraceRejectsBadHeader)
{
  const auto p = temp_path("bad.csv");
  {
    std::ofstream f(p);
    f << "step,t,foo\n0,0,1\n";
  }
  EXPECT_THROW(read_trace(p), SchemaError);
  std::filesystem::remove(p);
}

// ---------------------------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------------------------

TEST(Sweep, PairedCellsAndThreadIndependence)
{
  SweepGrid g;
  g.base   = short_pendulum(RunMode::adaptive);
  g.values = {0, 20};
  g.snr_db = {std::numeric_limits<double>::infinity(), 30};
  g.seed   = 5;
  g.threads = 1;
  const auto a = run_sweep(g, pendulum_model());
  g.threads    = 3;
  const auto b = run_sweep(g, pendulum_model());
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].status, "ok");
    EXPECT_EQ(a[i].nominal.e_theta, b[i].nominal.e_theta);
    EXPECT_EQ(a[i].adaptive.e_theta, b[i].adaptive.e_theta);
  }
  // Nominal and adaptive of one cell share the plant draw.
  const auto cn = sweep_cell_config(g, 1, 20, 30, RunMode::nominal);
  const auto ca = sweep_cell_config(g, 1, 20, 30, RunMode::adaptive);
  EXPECT_EQ(cn.seed, ca.seed);
  EXPECT_EQ(std::get<PendulumChainParams>(episode_params(cn)).kappa, std::get<PendulumChainParams>(episode_params(ca)).kappa);

  const auto p = temp_path("sweep.csv");
  write_sweep_csv(g, a, p);
  const auto t = read_csv(p);
  EXPECT_EQ(t.header.front(), "delta");
  EXPECT_TRUE(t.has_column("improvement_thetadot"));
  EXPECT_EQ(t.rows.size(), 4u);
  EXPECT_EQ(t.rows[0][1], "inf");
  std::filesystem::remove(p);
}

TEST(Sweep, GridJson)
{
  const Json j = {{"base", {{"system", "pendulum"}}}, {"axis", "c"}, {"values", {-0.05, 0.05}}, {"snr_db", {"inf", 20}}};
  const auto g = sweep_grid_from_json(j);
  EXPECT_EQ(g.axis, "c");
  ASSERT_EQ(g.snr_db.size(), 2u);
  EXPECT_TRUE(std::isinf(g.snr_db[0]));
  const auto c = sweep_cell_config(g, 0, -0.05, 20, RunMode::nominal);
  EXPECT_EQ(c.disturbance.kind, DisturbanceSpec::Kind::constant);
  EXPECT_DOUBLE_EQ(c.disturbance.c, -0.05);
  EXPECT_THROW(sweep_grid_from_json(Json{{"base", {{"system", "pendulum"}}}, {"axis", "mass"}, {"values", {1}}}), ConfigError);
}

TEST(Metrics, SingleInstantRelativeError)
{
  Matrix x(2, 1), ref(2, 1);
  x << 0.9, 2.2;
  ref << 1, 2;
  EXPECT_NEAR(relative_average_error(x, ref, {0, 1}), 0.1, 1e-15);
  EXPECT_EQ(relative_average_error(ref, ref, {0, 1}), 0.0);
}

TEST(Reference, SinusoidHalfPeriodFlipsSign)
{
  ReferenceSpec r;
  r.kind         = ReferenceSpec::Kind::sinusoid_joints;
  r.omega        = Vector::Constant(1, 2.0);
  const double T = 2 * std::numbers::pi / 2.0, t = 0.3;
  const Vector a = reference_at(r, t, SystemId::manipulator, 6, Vector::Zero(6));
  const Vector b = reference_at(r, t + T / 2, SystemId::manipulator, 6, Vector::Zero(6));
  EXPECT_LT((a + b).norm(), 1e-12);
}

TEST(ClosedLoop, ZeroDurationGivesEmptyMetrics)
{
  auto c     = short_pendulum(RunMode::adaptive);
  c.duration = 0;
  c.snr_db   = 20;
  const auto r = run_closed_loop(c, pendulum_model());
  EXPECT_EQ(r.trace.size(), 0);
  EXPECT_EQ(r.metrics.steps, 0);
  EXPECT_FALSE(r.metrics.diverged);
}
