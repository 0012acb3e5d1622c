#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "akmpc/offline.hpp"
#include "support/oracles.hpp"

using namespace akmpc;
using namespace akmpc::oracle;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string & name)
{
  const auto d = fs::temp_directory_path() / ("akmpc_offline_" + name);
  fs::remove_all(d);
  return d;
}

std::string slurp(const fs::path & p)
{
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

GenConfig small_config(SystemId s, int trajectories, int snapshots)
{
  auto c         = GenConfig::defaults(s);
  c.trajectories = trajectories;
  c.snapshots    = snapshots;
  c.seed         = 7;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------------------------

TEST(Generate, PendulumProtocolDimensions)
{
  auto c = GenConfig::defaults(SystemId::pendulum);
  EXPECT_EQ(c.trajectories, 100);
  EXPECT_EQ(c.snapshots, 800);
  EXPECT_DOUBLE_EQ(c.dt, 0.01);
  const auto ds = generate_dataset(SystemId::pendulum, c);
  ASSERT_EQ(ds.trajectories.size(), 100u);
  EXPECT_EQ(ds.n, 10);
  EXPECT_EQ(ds.m, 1);
  EXPECT_EQ(ds.count(false), 75u);
  EXPECT_EQ(ds.count(true), 25u);
  for (const auto & tr : ds.trajectories) {
    EXPECT_EQ(tr.states.rows(), 10);
    EXPECT_EQ(tr.states.cols(), 800);
    EXPECT_EQ(tr.X().cols(), 799);
    // initial angles and rates inside the sampling box
    for (int i = 0; i < 5; ++i) {
      EXPECT_LE(std::abs(tr.states(2 * i, 0)), 20.0);
      EXPECT_LE(std::abs(tr.states(2 * i + 1, 0)), 1.0);
    }
    EXPECT_LE(tr.inputs.cwiseAbs().maxCoeff(), c.input_limit);
  }
}

TEST(Generate, ProtocolSnapshotCountsPerSystem)
{
  EXPECT_EQ(GenConfig::defaults(SystemId::manipulator).snapshots, 100);
  EXPECT_EQ(GenConfig::defaults(SystemId::quadrotor).snapshots, 600);
}

TEST(Generate, EmptyRequestRejected)
{
  auto c         = GenConfig::defaults(SystemId::pendulum);
  c.trajectories = 0;
  EXPECT_THROW(generate_dataset(SystemId::pendulum, c), ConfigError);
  c.trajectories = 3;
  c.snapshots    = 0;
  EXPECT_THROW(generate_dataset(SystemId::pendulum, c), ConfigError);
}

TEST(Generate, ShiftPropertyAllSystems)
{
  for (auto s : {SystemId::pendulum, SystemId::manipulator, SystemId::quadrotor}) {
    const auto c  = small_config(s, 4, 60);
    const auto ds = generate_dataset(s, c);
    const Plant plant(default_params(s), {}, c.substeps);
    for (const auto & tr : ds.trajectories) {
      const Matrix X = tr.X(), Y = tr.Y(), U = tr.U();
      for (Eigen::Index j = 0; j < X.cols(); ++j) {
        const Vector next = plant.step(X.col(j), U.col(j), double(j) * c.dt, c.dt);
        ASSERT_LT((next - Y.col(j)).cwiseAbs().maxCoeff(), 1e-12) << to_string(s) << " column " << j;
      }
    }
  }
}

TEST(Generate, FixedSeedGivesIdenticalBytes)
{
  const auto c = small_config(SystemId::quadrotor, 6, 50);
  const auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
  write_dataset(generate_dataset(SystemId::quadrotor, c), a);
  write_dataset(generate_dataset(SystemId::quadrotor, c), b);
  for (const auto & e : fs::directory_iterator(a)) {
    EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename())) << e.path();
  }
  auto c2 = c;
  c2.seed = 8;
  const auto other = generate_dataset(SystemId::quadrotor, c2);
  EXPECT_NE(read_dataset(a).trajectories[0].states, other.trajectories[0].states);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Generate, ManipulatorTracksWaypointPath)
{
  auto c           = small_config(SystemId::manipulator, 5, 100);
  c.excitation_std = 0;
  const auto ds    = generate_dataset(SystemId::manipulator, c);
  EXPECT_EQ(ds.rejected, 0);
  for (const auto & tr : ds.trajectories) { EXPECT_LT(tr.states.topRows(3).cwiseAbs().maxCoeff(), 3.0); }
}

TEST(Generate, QuadrotorStaysNearWorkspace)
{
  const auto c  = small_config(SystemId::quadrotor, 5, 600);
  const auto ds = generate_dataset(SystemId::quadrotor, c);
  for (const auto & tr : ds.trajectories) {
    EXPECT_LT(tr.states.topRows(2).cwiseAbs().maxCoeff(), 3 * c.position_range);
    EXPECT_LT(tr.states.row(2).cwiseAbs().maxCoeff(), std::numbers::pi / 2);
  }
}

TEST(DatasetFile, RoundTripIsBitwise)
{
  const auto ds  = generate_dataset(SystemId::manipulator, small_config(SystemId::manipulator, 4, 30));
  const auto dir = fresh_dir("rt");
  write_dataset(ds, dir);
  const auto back = read_dataset(dir);
  EXPECT_EQ(back.system, ds.system);
  EXPECT_EQ(back.dt, ds.dt);
  EXPECT_EQ(back.seed, ds.seed);
  ASSERT_EQ(back.trajectories.size(), ds.trajectories.size());
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
    EXPECT_EQ(back.trajectories[i].states, ds.trajectories[i].states);
    EXPECT_EQ(back.trajectories[i].inputs, ds.trajectories[i].inputs);
    EXPECT_EQ(back.trajectories[i].validation, ds.trajectories[i].validation);
  }
  const auto header = read_csv(dir / "traj_0000.csv").header;
  const std::vector<std::string> expect{"t", "x_0", "x_1", "x_2", "x_3", "x_4", "x_5", "u_0", "u_1", "u_2"};
  EXPECT_EQ(header, expect);
  fs::remove_all(dir);
}

TEST(DatasetFile, MissingManifestIsSchemaError)
{
  const auto dir = fresh_dir("missing");
  fs::create_directories(dir);
  EXPECT_THROW(read_dataset(dir), SchemaError);
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------------------------
// Nominal controllers
// ---------------------------------------------------------------------------------------------

TEST(CubicPath, InterpolatesWaypointsAndSlopes)
{
  Rng rng(3);
  const auto path = random_cubic_path(2, 3.0, 0.5, 1.0, 2.0, rng);
  for (Eigen::Index k = 0; k + 1 < path.points.cols(); ++k) {
    const auto s = path.eval(0.5 * double(k));
    EXPECT_LT((s.q - path.points.col(k)).norm(), 1e-12);
    EXPECT_LT((s.qd - path.slopes.col(k)).norm(), 1e-12);
  }
  const double t = 1.234, h = 1e-5;
  const auto s = path.eval(t), sp = path.eval(t + h), sm = path.eval(t - h);
  EXPECT_LT((s.qd - (sp.q - sm.q) / (2 * h)).norm(), 1e-6);
  EXPECT_LT((s.qdd - (sp.qd - sm.qd) / (2 * h)).norm(), 1e-5);
}

TEST(Lqr, ScalarRiccatiClosedForm)
{
  // a = b = q = r = 1: P = (1 + sqrt 5) / 2, K = P / (1 + P)
  const Matrix one = Matrix::Ones(1, 1);
  const double P   = (1 + std::sqrt(5.0)) / 2;
  EXPECT_NEAR(dlqr(one, one, one, one)(0, 0), P / (1 + P), 1e-9);
}

TEST(Lqr, QuadrotorHoverClosedLoopStable)
{
  const QuadrotorParams p;
  const Matrix K = quadrotor_lqr_gain(p, 0.01, (Vector(6) << 10, 10, 10, 1, 1, 1).finished(), Vector::Ones(2));
  Matrix Ac = Matrix::Zero(6, 6), Bc = Matrix::Zero(6, 2);
  Ac(0, 3) = Ac(1, 4) = Ac(2, 5) = 1;
  Ac(3, 2)                       = -p.g;
  Bc(4, 0) = Bc(4, 1) = 1 / p.m;
  Bc(5, 0)            = -p.l_arm / p.I;
  Bc(5, 1)            = p.l_arm / p.I;
  Matrix M = Matrix::Zero(8, 8);
  M.topLeftCorner(6, 6)  = Ac * 0.01;
  M.topRightCorner(6, 2) = Bc * 0.01;
  const Matrix E  = taylor_exp(M);
  const Matrix Acl = E.topLeftCorner(6, 6) - E.topRightCorner(6, 2) * K;
  EXPECT_LT(Acl.eigenvalues().cwiseAbs().maxCoeff(), 1.0);
}

TEST(Discretize, MatchesTaylorOracle)
{
  Matrix Ac(2, 2), Bc(2, 1);
  Ac << 0, 1, -4, -0.3;
  Bc << 0, 1;
  const auto [Ad, Bd] = discretize(Ac, Bc, 0.05);
  Matrix M = Matrix::Zero(3, 3);
  M.topLeftCorner(2, 2)  = Ac * 0.05;
  M.topRightCorner(2, 1) = Bc * 0.05;
  const Matrix E = taylor_exp(M);
  EXPECT_LT((Ad - E.topLeftCorner(2, 2)).norm(), 1e-13);
  EXPECT_LT((Bd - E.topRightCorner(2, 1)).norm(), 1e-13);
}

// ---------------------------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------------------------

namespace {

KoopmanModel small_model(ModelMode mode, bool constant, std::uint64_t seed)
{
  Rng rng(seed);
  const std::vector<Eigen::Index> hidden{6};
  auto m = make_model(mode, 3, 2, 7, hidden, constant, rng);
  m.A    = 0.3 * Matrix::Random(7, 7);
  m.B    = 0.3 * Matrix::Random(7, m.b_cols());
  for (auto & b : m.lifting_net.biases) { b.setRandom(); }
  return m;
}

SnapshotBatch random_batch(int n, int m, int cols, std::uint64_t seed)
{
  Rng rng(seed);
  SnapshotBatch b{Matrix(n, cols), Matrix(n, cols), Matrix(m, cols)};
  for (auto * M : {&b.X, &b.Y, &b.U}) {
    for (Eigen::Index i = 0; i < M->size(); ++i) { M->data()[i] = uniform(rng, -1, 1); }
  }
  return b;
}

}  // namespace

TEST(NominalLosses, ReconstructionIsZero)
{
  for (auto mode : {ModelMode::linear, ModelMode::bilinear}) {
    const auto L = nominal_losses(small_model(mode, true, 1), random_batch(3, 2, 40, 2));
    EXPECT_EQ(L.rec, 0.0);
    EXPECT_GT(L.pred, 0.0);
  }
}

TEST(NominalLosses, ExactLinearDataGivesZeroLoss)
{
  for (bool constant : {false, true}) {
    Rng rng(4);
    const int n = 4, p = constant ? 5 : 4;
    auto model  = make_model(ModelMode::linear, n, 2, p, std::vector<Eigen::Index>{}, constant, rng);
    model.A.topRows(n) = Matrix::Random(n, p);
    model.B.topRows(n) = Matrix::Random(n, 2);
    auto b             = random_batch(n, 2, 30, 5);
    const Matrix Z     = lift_batch(model, b.X);
    b.Y                = (model.A * Z + model.B * b.U).topRows(n);
    const auto L       = nominal_losses(model, b);
    EXPECT_LT(L.pred, 1e-28);
    EXPECT_LT(L.lift, 1e-28);
  }
}

TEST(NominalLosses, GradientMatchesFiniteDifferences)
{
  TrainConfig cfg;
  cfg.gamma1 = 0;  // the L1 kink is not differentiable; the smooth part is checked here
  cfg.gamma2 = 1e-3;
  for (auto mode : {ModelMode::linear, ModelMode::bilinear}) {
    auto model   = small_model(mode, true, 6);
    const auto b = random_batch(3, 2, 25, 7);
    ModelGradients g;
    nominal_losses(model, b, cfg, &g);

    auto probe = model;
    auto loss  = [&](const Vector & theta) {
      Eigen::Index k = probe.lifting_net.num_params();
      unflatten(theta.head(k), probe.lifting_net);
      probe.A.reshaped() = theta.segment(k, probe.A.size());
      k += probe.A.size();
      probe.B.reshaped() = theta.segment(k, probe.B.size());
      return nominal_losses(probe, b, cfg).total(cfg);
    };
    Vector theta(model.lifting_net.num_params() + model.A.size() + model.B.size());
    theta << flatten(model.lifting_net), model.A.reshaped(), model.B.reshaped();
    Vector analytic(theta.size());
    analytic << flatten(g.net), g.A.reshaped(), g.B.reshaped();
    const Vector numeric = finite_diff_grad(loss, theta, 1e-6);
    EXPECT_LT((analytic - numeric).norm() / numeric.norm(), 1e-6) << to_string(mode);
  }
}

TEST(NominalLosses, PerturbingAChangesLiftLossLinearly)
{
  const auto model = small_model(ModelMode::linear, false, 8);
  const auto b     = random_batch(3, 2, 30, 9);
  const Matrix D   = Matrix::Random(7, 7);
  std::vector<double> diffs;
  for (double eps : {1e-3, 5e-4, 2.5e-4}) {
    auto mp = model, mm = model;
    mp.A += eps * D;
    mm.A -= eps * D;
    diffs.push_back(nominal_losses(mp, b).lift - nominal_losses(mm, b).lift);
  }
  // central differences are first order in eps up to O(eps^3): halving eps halves the change
  EXPECT_NEAR(diffs[0] / diffs[1], 2.0, 0.01);
  EXPECT_NEAR(diffs[1] / diffs[2], 2.0, 0.01);
}

// ---------------------------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------------------------

TEST(Train, ZeroEpochsReturnsInitialization)
{
  const auto ds = generate_dataset(SystemId::pendulum, small_config(SystemId::pendulum, 4, 40));
  ArchConfig arch;
  TrainConfig cfg;
  cfg.epochs        = 0;
  const auto model  = train_nominal(ds, arch, cfg);
  const auto init   = init_model(ds, arch, cfg);
  EXPECT_EQ(model.A, init.A);
  EXPECT_EQ(model.B, init.B);
  EXPECT_EQ(flatten(model.lifting_net), flatten(init.lifting_net));
  EXPECT_EQ(model.input_offset, init.input_offset);
}

TEST(Train, RecoversDiscreteLinearSystem)
{
  Matrix A0(3, 3), B0(3, 2);
  A0 << -0.5, 1.0, 0.0, -1.0, -0.4, 0.3, 0.2, 0.0, -0.8;
  B0 << 1.0, 0.0, 0.0, 0.5, 0.3, -0.7;
  const double dt = 0.01;
  const auto ds   = linear_dataset(A0, B0, 16, 60, dt);

  ArchConfig arch;
  arch.lifted_dim       = 3;
  arch.hidden           = {};
  arch.constant_channel = false;
  TrainConfig cfg;
  cfg.gamma1 = cfg.gamma2 = 0;
  cfg.epochs              = 5;
  const auto model        = train_nominal(ds, arch, cfg);

  Matrix M = Matrix::Zero(5, 5);
  M.topLeftCorner(3, 3)  = A0 * dt;
  M.topRightCorner(3, 2) = B0 * dt;
  const Matrix E         = taylor_exp(M);
  EXPECT_LT((model.A - E.topLeftCorner(3, 3)).cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_LT((model.B - E.topRightCorner(3, 2)).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Train, ReproducibleBitForBit)
{
  const auto ds = generate_dataset(SystemId::manipulator, small_config(SystemId::manipulator, 8, 40));
  ArchConfig arch;
  arch.hidden = {8, 8};
  TrainConfig cfg;
  cfg.epochs   = 3;
  cfg.batch    = 32;
  const auto a = train_nominal(ds, arch, cfg), b = train_nominal(ds, arch, cfg);
  EXPECT_EQ(a.A, b.A);
  EXPECT_EQ(a.B, b.B);
  EXPECT_EQ(flatten(a.lifting_net), flatten(b.lifting_net));
}

TEST(Train, KeepsProjectionAndConstantChannel)
{
  const auto ds = generate_dataset(SystemId::quadrotor, small_config(SystemId::quadrotor, 6, 60));
  ArchConfig arch;
  arch.mode       = ModelMode::bilinear;
  arch.lifted_dim = 15;
  arch.hidden     = {10};
  TrainConfig cfg;
  cfg.epochs       = 2;
  cfg.batch        = 64;
  const auto model = train_nominal(ds, arch, cfg);
  EXPECT_TRUE(model.has_identity_projection());
  EXPECT_EQ(model.A.row(14).head(14), Vector::Zero(14).transpose());
  EXPECT_EQ(model.A(14, 14), 1.0);
  EXPECT_EQ(model.B.row(14).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Train, ValidationErrorDropsTenfoldOnAllSystems)
{
  struct Case
  {
    SystemId s;
    int p;
    std::vector<Eigen::Index> hidden;
  };
  for (const auto & c : {Case{SystemId::pendulum, 17, {40, 40}}, Case{SystemId::manipulator, 17, {30, 30}},
                         Case{SystemId::quadrotor, 15, {20, 20}}}) {
    const auto ds = generate_dataset(c.s, small_config(c.s, 20, c.s == SystemId::manipulator ? 100 : 200));
    ArchConfig arch;
    arch.lifted_dim = c.p;
    arch.hidden     = c.hidden;
    TrainConfig cfg;
    cfg.epochs = 15;
    TrainReport rep;
    train_nominal(ds, arch, cfg, &rep);
    EXPECT_LE(rep.val_pred_final, 0.1 * rep.val_pred_init) << to_string(c.s);
    ASSERT_GE(rep.train_loss.size(), 2u);
    EXPECT_LT(rep.train_loss.back(), rep.train_loss.front()) << to_string(c.s);
  }
}

TEST(Train, RestartsKeepLowestValidationRun)
{
  const auto ds = generate_dataset(SystemId::manipulator, small_config(SystemId::manipulator, 8, 40));
  ArchConfig arch;
  arch.hidden = {8};
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch  = 32;
  cfg.seed   = 5;
  std::vector<double> losses;
  std::vector<KoopmanModel> singles;
  for (int r = 0; r < 3; ++r) {
    TrainConfig c = cfg;
    c.seed += std::uint64_t(r);
    TrainReport rep;
    singles.push_back(train_nominal(ds, arch, c, &rep));
    losses.push_back(rep.val_pred_final);
  }
  const auto k = std::size_t(std::min_element(losses.begin(), losses.end()) - losses.begin());
  cfg.restarts = 3;
  TrainReport rep;
  const auto best = train_nominal(ds, arch, cfg, &rep);
  EXPECT_EQ(rep.restart, int(k));
  EXPECT_EQ(rep.val_pred_final, losses[k]);
  EXPECT_EQ(best.A, singles[k].A);
  EXPECT_EQ(flatten(best.lifting_net), flatten(singles[k].lifting_net));
  cfg.restarts = 0;
  EXPECT_THROW(train_nominal(ds, arch, cfg), ConfigError);
}

TEST(Train, RejectsBadConfig)
{
  const auto ds = generate_dataset(SystemId::pendulum, small_config(SystemId::pendulum, 4, 40));
  TrainConfig cfg;
  cfg.batch = 0;
  EXPECT_THROW(train_nominal(ds, ArchConfig{}, cfg), ConfigError);
}

// ---------------------------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------------------------

TEST(Evaluate, ExactModelHasZeroError)
{
  Matrix Ad(2, 2), Bd(2, 1);
  Ad << 0.99, 0.01, -0.02, 0.98;
  Bd << 0.0, 0.01;
  SnapshotDataset ds;
  ds.n = 2;
  ds.m = 1;
  Trajectory tr{Matrix(2, 50), Matrix::Random(1, 50), true};
  tr.states.col(0) << 1, -1;
  for (int k = 0; k + 1 < 50; ++k) { tr.states.col(k + 1) = Ad * tr.states.col(k) + Bd * tr.inputs.col(k); }
  ds.trajectories.push_back(tr);
  Rng rng(0);
  auto model = make_model(ModelMode::linear, 2, 1, 2, std::vector<Eigen::Index>{}, false, rng);
  model.A    = Ad;
  model.B    = Bd;
  for (int h : {1, 5, 20}) { EXPECT_LT(evaluate_model(model, ds, h).max, 1e-12); }
  EXPECT_THROW(evaluate_model(model, ds, 0), ConfigError);
}

TEST(Evaluate, HorizonOneMatchesOneStepResidual)
{
  const auto ds    = generate_dataset(SystemId::pendulum, small_config(SystemId::pendulum, 4, 50));
  const auto m10         = init_model(ds, ArchConfig{}, TrainConfig{});
  const auto rep   = evaluate_model(m10, ds, 1);
  std::size_t k    = 0;
  for (const auto & tr : ds.trajectories) {
    if (!tr.validation) { continue; }
    const double pred = nominal_losses(m10, {tr.X(), tr.Y(), tr.U()}).pred;
    EXPECT_NEAR(rep.rmse[k++], std::sqrt(pred / m10.n), 1e-12);
  }
}

TEST(Evaluate, ErrorGrowsWithHorizonOnAverage)
{
  const auto ds = generate_dataset(SystemId::quadrotor, small_config(SystemId::quadrotor, 12, 200));
  ArchConfig arch;
  arch.lifted_dim = 15;
  arch.hidden     = {20, 20};
  TrainConfig cfg;
  cfg.epochs       = 5;
  const auto model = train_nominal(ds, arch, cfg);
  double prev      = 0;
  for (int h : {1, 5, 20, 50}) {
    const double e = evaluate_model(model, ds, h).mean;
    EXPECT_GE(e, prev) << "horizon " << h;
    prev = e;
  }
}
