/// Independent reference solutions shared by the unit tests and the acceptance binary.
#pragma once

#include <limits>
#include <stdexcept>

#include "akmpc/adapt.hpp"
#include "akmpc/dynamics.hpp"
#include "akmpc/neural.hpp"
#include "akmpc/offline.hpp"
#include "akmpc/qp.hpp"
#include "akmpc/random.hpp"

namespace akmpc::oracle {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------------------------
// Quadratic programs
// ---------------------------------------------------------------------------------------------

inline Matrix random_spd(Rng & rng, int n, double min_eig)
{
  Matrix M(n, n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) { M(i, j) = gaussian(rng); }
  }
  return M * M.transpose() / n + min_eig * Matrix::Identity(n, n);
}

inline QpProblem make_qp(const Matrix & P, const Vector & q, const Matrix & A, const Vector & l, const Vector & u)
{
  return {to_sparse(P), q, to_sparse(A), l, u};
}

/// Largest violation among stationarity, primal feasibility and complementarity.
inline double kkt_violation(const QpProblem & qp, const Vector & x, const Vector & y)
{
  const Matrix P = Matrix(qp.P), A = Matrix(qp.A);
  double worst   = (P * x + qp.q + A.transpose() * y).lpNorm<Eigen::Infinity>();
  const Vector Ax = A * x;
  for (Eigen::Index i = 0; i < Ax.size(); ++i) {
    worst = std::max({worst, qp.l(i) - Ax(i), Ax(i) - qp.u(i)});
    if (y(i) > 0) { worst = std::max(worst, std::isinf(qp.u(i)) ? kInf : y(i) * std::abs(qp.u(i) - Ax(i))); }
    if (y(i) < 0) { worst = std::max(worst, std::isinf(qp.l(i)) ? kInf : -y(i) * std::abs(Ax(i) - qp.l(i))); }
  }
  return worst;
}

/// Dense primal active-set method for min 1/2 x'Px + q'x, l <= x <= u with P positive definite.
inline Vector active_set_box_qp(const Matrix & P, const Vector & q, const Vector & l, const Vector & u)
{
  const auto n = q.size();
  Vector x     = Vector::Zero(n).cwiseMax(l).cwiseMin(u);
  std::vector<int> state(std::size_t(n), 0);  // -1 at lower, +1 at upper, 0 free
  for (Eigen::Index i = 0; i < n; ++i) {
    if (x(i) == l(i)) { state[std::size_t(i)] = -1; }
    else if (x(i) == u(i)) { state[std::size_t(i)] = 1; }
  }
  for (int iter = 0; iter < 10000; ++iter) {
    std::vector<Eigen::Index> F;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (state[std::size_t(i)] == 0) { F.push_back(i); }
    }
    Vector target = x;
    if (!F.empty()) {
      const auto nf = Eigen::Index(F.size());
      Matrix Pff(nf, nf);
      Vector rhs(nf);
      for (Eigen::Index a = 0; a < nf; ++a) {
        rhs(a) = -q(F[std::size_t(a)]);
        for (Eigen::Index j = 0; j < n; ++j) {
          if (state[std::size_t(j)] != 0) { rhs(a) -= P(F[std::size_t(a)], j) * x(j); }
        }
        for (Eigen::Index b = 0; b < nf; ++b) { Pff(a, b) = P(F[std::size_t(a)], F[std::size_t(b)]); }
      }
      const Vector xf = Pff.llt().solve(rhs);
      for (Eigen::Index a = 0; a < nf; ++a) { target(F[std::size_t(a)]) = xf(a); }
    }
    const Vector d = target - x;
    double step    = 1.0;
    Eigen::Index blocking = -1;
    for (Eigen::Index i : F) {
      if (d(i) > 0 && x(i) + d(i) > u(i)) {
        const double s = (u(i) - x(i)) / d(i);
        if (s < step) { step = s, blocking = i; }
      } else if (d(i) < 0 && x(i) + d(i) < l(i)) {
        const double s = (l(i) - x(i)) / d(i);
        if (s < step) { step = s, blocking = i; }
      }
    }
    x += step * d;
    if (blocking >= 0) {
      state[std::size_t(blocking)] = d(blocking) > 0 ? 1 : -1;
      x(blocking)                  = d(blocking) > 0 ? u(blocking) : l(blocking);
      continue;
    }
    const Vector g = P * x + q;
    Eigen::Index release = -1;
    double most          = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double viol = state[std::size_t(i)] == -1 ? -g(i) : state[std::size_t(i)] == 1 ? g(i) : 0.0;
      if (viol > most) { most = viol, release = i; }
    }
    if (release < 0) { return x; }
    state[std::size_t(release)] = 0;
  }
  throw std::runtime_error("active set did not terminate");
}

struct RandomBoxQp
{
  Matrix P;
  Vector q, l, u;
};

inline RandomBoxQp random_box_qp(Rng & rng, int n)
{
  RandomBoxQp r;
  r.P = random_spd(rng, n, 0.1);
  r.q.resize(n);
  r.l.resize(n);
  r.u.resize(n);
  for (int i = 0; i < n; ++i) {
    r.q(i)          = 2 * gaussian(rng);
    const double c  = 0.5 * gaussian(rng);
    const double hw = uniform(rng, 0.05, 1.0);
    r.l(i)          = c - hw;
    r.u(i)          = c + hw;
    if (uniform(rng, 0, 1) < 0.1) { r.l(i) = -kInf; }
    if (uniform(rng, 0, 1) < 0.1) { r.u(i) = kInf; }
  }
  return r;
}

// ---------------------------------------------------------------------------------------------
// Adaptation windows
// ---------------------------------------------------------------------------------------------

inline Matrix random_matrix(Rng & rng, int r, int c, double scale)
{
  Matrix M(r, c);
  for (int j = 0; j < c; ++j) {
    for (int i = 0; i < r; ++i) { M(i, j) = scale * gaussian(rng); }
  }
  return M;
}

inline Vector random_vector(Rng & rng, int n, double scale) { return random_matrix(rng, n, 1, scale).col(0); }

/// Window filled with residuals generated exactly by a planted delta.
inline AdaptationWindow planted_window(
  Rng & rng, ModelMode mode, int p, int m, int w, const AdaptationDelta & truth, double noise = 0)
{
  AdaptationWindow win(w);
  for (int i = 0; i < w; ++i) {
    const Vector z = random_vector(rng, p, 1.0);
    const Vector u = random_vector(rng, m, 1.0);
    const Vector v = mode == ModelMode::linear ? u : kron(z, u);
    Vector dz      = truth.dA * z + truth.dB * v;
    if (noise > 0) { dz += random_vector(rng, p, noise); }
    win.push({z, u, dz});
  }
  return win;
}

inline AdaptationDelta random_delta(Rng & rng, ModelMode mode, int p, int m, double scale)
{
  return {random_matrix(rng, p, p, scale), random_matrix(rng, p, mode == ModelMode::linear ? m : p * m, scale)};
}

inline AdaptConfig unregularized(int window, int epochs, double lr)
{
  AdaptConfig c;
  c.window = window;
  c.epochs = epochs;
  c.beta1 = c.beta2 = c.beta3 = c.beta4 = 0;
  c.adam.lr                             = lr;
  return c;
}

// ---------------------------------------------------------------------------------------------
// Linear systems
// ---------------------------------------------------------------------------------------------

/// exp(M) by a long Taylor series with scaling and squaring; independent of Eigen's Pade code.
inline Matrix taylor_exp(const Matrix & M)
{
  int squarings = 0;
  Matrix S      = M;
  while (S.cwiseAbs().maxCoeff() > 0.1) {
    S /= 2;
    ++squarings;
  }
  Matrix E = Matrix::Identity(M.rows(), M.cols()), term = E;
  for (int k = 1; k < 30; ++k) {
    term = term * S / double(k);
    E += term;
  }
  for (int i = 0; i < squarings; ++i) { E = E * E; }
  return E;
}

/// Dataset from xdot = A0 x + B0 u with inputs held over each step, integrated by fine RK4.
inline SnapshotDataset linear_dataset(const Matrix & A0, const Matrix & B0, int trajectories, int snapshots, double dt)
{
  SnapshotDataset ds;
  ds.n  = int(A0.rows());
  ds.m  = int(B0.cols());
  ds.dt = dt;
  Rng rng(11);
  auto f = [&](const Vector & x, const Vector & u) -> Vector { return A0 * x + B0 * u; };
  for (int t = 0; t < trajectories; ++t) {
    Trajectory tr{Matrix(ds.n, snapshots), Matrix(ds.m, snapshots), t % 4 == 3};
    Vector x(ds.n);
    for (auto & v : x) { v = uniform(rng, -1, 1); }
    for (int k = 0; k < snapshots; ++k) {
      Vector u(ds.m);
      for (auto & v : u) { v = uniform(rng, -1, 1); }
      tr.states.col(k) = x;
      tr.inputs.col(k) = u;
      for (int s = 0; s < 20; ++s) { x = rk4_step(f, x, u, dt / 20); }
    }
    ds.trajectories.push_back(tr);
  }
  return ds;
}

// ---------------------------------------------------------------------------------------------
// Dynamics and gradients
// ---------------------------------------------------------------------------------------------

/// Kinetic and potential energy of the 3R arm from explicit link kinematics.
inline double manipulator_energy(const Vector & x, const ManipulatorParams & p)
{
  const double phi[3] = {x(0), x(0) + x(1), x(0) + x(1) + x(2)};
  const double dphi[3] = {x(3), x(3) + x(4), x(3) + x(4) + x(5)};
  double py = 0, vx = 0, vy = 0, E = 0;
  for (int i = 0; i < 3; ++i) {
    const double r = p.length[i] / 2;
    const double cy = py + r * std::sin(phi[i]);
    const double cvx = vx - r * std::sin(phi[i]) * dphi[i], cvy = vy + r * std::cos(phi[i]) * dphi[i];
    E += 0.5 * p.mass[i] * (cvx * cvx + cvy * cvy) + 0.5 * p.inertia[i] * dphi[i] * dphi[i];
    E += p.mass[i] * p.g * cy;
    py += p.length[i] * std::sin(phi[i]);
    vx += -p.length[i] * std::sin(phi[i]) * dphi[i];
    vy += p.length[i] * std::cos(phi[i]) * dphi[i];
  }
  return E;
}

inline Vector rollout(const Plant & plant, Vector x, const Vector & u, double dt, int steps)
{
  for (int k = 0; k < steps; ++k) {
    x = rk4_step([&](double t, const Vector & xx, const Vector & uu) { return plant.deriv(t, xx, uu); }, k * dt, x, u, dt);
  }
  return x;
}

inline double rk4_order(const Plant & plant, const Vector & x0, const Vector & u, double T, double dt)
{
  const Vector a = rollout(plant, x0, u, dt, int(std::round(T / dt)));
  const Vector b = rollout(plant, x0, u, dt / 2, int(std::round(2 * T / dt)));
  const Vector c = rollout(plant, x0, u, dt / 4, int(std::round(4 * T / dt)));
  return std::log2((a - b).norm() / (b - c).norm());
}

inline double relative_error(const Vector & a, const Vector & b) { return (a - b).norm() / std::max(b.norm(), 1e-300); }

}  // namespace akmpc::oracle
