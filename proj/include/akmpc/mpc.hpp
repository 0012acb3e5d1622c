#pragma once

/**
 * @file
 * @brief Reference-tracking MPC on the lifted model.
 *
 * Decision vector [z_1 .. z_S, u_0 .. u_{S-1}]. Dynamics enter as equality rows, the state box acts
 * on C z_k = x-part of z_k and the input box on u_k. Cost: sum (C z_k - r_k)' Q (.) + u_k' R_u u_k.
 * The bilinear model is handled by SQP: each outer iteration linearizes A z + B (z kron u) about
 * the current iterate and solves the resulting QP.
 */

#include <optional>

#include "adapt.hpp"
#include "json_util.hpp"
#include "koopman.hpp"
#include "qp.hpp"

namespace akmpc {

struct MpcConfig
{
  int horizon = 20;
  Matrix Q;    ///< n x n; empty means identity
  Matrix R_u;  ///< m x m; empty means 0.01 I
  Vector x_min, x_max;  ///< empty means unbounded
  Vector u_min, u_max;
  AdmmSettings solver{.eps_abs = 1e-4, .eps_rel = 1e-4};  ///< closed-loop tolerances, looser than the standalone QP default
  int sqp_max_iter    = 10;
  double sqp_step_tol = 1e-4;
  bool warm_start     = true;

  /// Fill defaults for an n-state, m-input plant and check invariants.
  MpcConfig resolved(int n, int m) const
  {
    MpcConfig c = *this;
    const double inf = std::numeric_limits<double>::infinity();
    if (c.Q.size() == 0) { c.Q = Matrix::Identity(n, n); }
    if (c.R_u.size() == 0) { c.R_u = 0.01 * Matrix::Identity(m, m); }
    if (c.x_min.size() == 0) { c.x_min = Vector::Constant(n, -inf); }
    if (c.x_max.size() == 0) { c.x_max = Vector::Constant(n, inf); }
    if (c.u_min.size() == 0) { c.u_min = Vector::Constant(m, -inf); }
    if (c.u_max.size() == 0) { c.u_max = Vector::Constant(m, inf); }
    c.validate(n, m);
    return c;
  }

  void validate(int n, int m) const
  {
    if (horizon < 1) { throw ConfigError("mpc: horizon must be >= 1"); }
    if (Q.rows() != n || Q.cols() != n || R_u.rows() != m || R_u.cols() != m) {
      throw DimensionError("mpc: Q must be n x n and R_u m x m");
    }
    if (x_min.size() != n || x_max.size() != n || u_min.size() != m || u_max.size() != m) {
      throw DimensionError("mpc: bound vectors have the wrong length");
    }
    if ((Q - Q.transpose()).cwiseAbs().maxCoeff() > 1e-12 || (R_u - R_u.transpose()).cwiseAbs().maxCoeff() > 1e-12) {
      throw ConfigError("mpc: Q and R_u must be symmetric");
    }
    if (n > 0 && Eigen::SelfAdjointEigenSolver<Matrix>(Q).eigenvalues().minCoeff() < -1e-12) {
      throw ConfigError("mpc: Q must be positive semidefinite");
    }
    if (Eigen::SelfAdjointEigenSolver<Matrix>(R_u).eigenvalues().minCoeff() <= 0) {
      throw ConfigError("mpc: R_u must be positive definite");
    }
    for (int i = 0; i < n; ++i) {
      if (!(x_min(i) <= x_max(i))) { throw ConfigError("mpc: x bounds not ordered"); }
    }
    for (int i = 0; i < m; ++i) {
      if (!(u_min(i) <= u_max(i))) { throw ConfigError("mpc: u bounds not ordered"); }
    }
    if (sqp_max_iter < 1 || !(sqp_step_tol > 0)) { throw ConfigError("mpc: bad SQP settings"); }
    solver.validate();
  }
};

namespace detail {

/// A list of numbers is a diagonal, a list of lists a full matrix.
inline Matrix weight_from_json(const Json & j, const char * what)
{
  try {
    if (j.is_null()) { return Matrix(); }
    if (j.is_number()) { return Matrix::Constant(1, 1, j.get<double>()); }
    if (!j.is_array()) { throw ConfigError(std::string("mpc: ") + what + " must be an array"); }
    if (j.empty() || !j.front().is_array()) {
      const auto d = j.get<std::vector<double>>();
      return Eigen::Map<const Vector>(d.data(), Eigen::Index(d.size())).asDiagonal();
    }
    const auto rows = j.get<std::vector<std::vector<double>>>();
    Matrix M(Eigen::Index(rows.size()), Eigen::Index(rows.front().size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != rows.front().size()) { throw ConfigError(std::string("mpc: ragged ") + what); }
      for (std::size_t c = 0; c < rows[r].size(); ++c) { M(Eigen::Index(r), Eigen::Index(c)) = rows[r][c]; }
    }
    return M;
  } catch (const Json::exception & e) {
    throw ConfigError(std::string("mpc: ") + what + ": " + e.what());
  }
}

inline Vector bounds_from_json(const Json & j, const char * key)
{
  if (!j.contains(key) || j.at(key).is_null()) { return {}; }
  const auto & a = j.at(key);
  if (!a.is_array()) { throw ConfigError(std::string("mpc: ") + key + " must be an array"); }
  Vector v(Eigen::Index(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto & e = a[i];
    if (e.is_number()) {
      v(Eigen::Index(i)) = e.get<double>();
    } else if (e.is_string() && (e == "inf" || e == "+inf")) {
      v(Eigen::Index(i)) = std::numeric_limits<double>::infinity();
    } else if (e.is_string() && e == "-inf") {
      v(Eigen::Index(i)) = -std::numeric_limits<double>::infinity();
    } else {
      throw ConfigError(std::string("mpc: ") + key + " entries must be numbers, \"inf\" or \"-inf\"");
    }
  }
  return v;
}

inline Json bounds_to_json(const Vector & v)
{
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    a.push_back(std::isinf(v(i)) ? Json(v(i) > 0 ? "inf" : "-inf") : Json(v(i)));
  }
  return a;
}

inline Json weight_to_json(const Matrix & M)
{
  if (M.size() == 0) { return nullptr; }
  if (M.isDiagonal(0.0)) { return to_std_vector(Vector(M.diagonal())); }
  Json a = Json::array();
  for (Eigen::Index r = 0; r < M.rows(); ++r) { a.push_back(to_std_vector(Vector(M.row(r).transpose()))); }
  return a;
}

}  // namespace detail

inline AdmmSettings admm_settings_from_json(const Json & j, AdmmSettings s = {})
{
  check_keys(j,
             {"rho", "sigma", "alpha", "eps_abs", "eps_rel", "eps_prim_inf", "max_iter", "check_interval", "adaptive_rho",
              "adaptive_rho_interval", "adaptive_rho_tolerance", "scaling_iters", "polish", "polish_refine_iters",
              "polish_delta"},
             "solver config");
  s.rho                    = get_or(j, "rho", s.rho);
  s.sigma                  = get_or(j, "sigma", s.sigma);
  s.alpha                  = get_or(j, "alpha", s.alpha);
  s.eps_abs                = get_or(j, "eps_abs", s.eps_abs);
  s.eps_rel                = get_or(j, "eps_rel", s.eps_rel);
  s.eps_prim_inf           = get_or(j, "eps_prim_inf", s.eps_prim_inf);
  s.max_iter               = get_or(j, "max_iter", s.max_iter);
  s.check_interval         = get_or(j, "check_interval", s.check_interval);
  s.adaptive_rho           = get_or(j, "adaptive_rho", s.adaptive_rho);
  s.adaptive_rho_interval  = get_or(j, "adaptive_rho_interval", s.adaptive_rho_interval);
  s.adaptive_rho_tolerance = get_or(j, "adaptive_rho_tolerance", s.adaptive_rho_tolerance);
  s.scaling_iters          = get_or(j, "scaling_iters", s.scaling_iters);
  s.polish                 = get_or(j, "polish", s.polish);
  s.polish_refine_iters    = get_or(j, "polish_refine_iters", s.polish_refine_iters);
  s.polish_delta           = get_or(j, "polish_delta", s.polish_delta);
  s.validate();
  return s;
}

inline Json admm_settings_to_json(const AdmmSettings & s)
{
  return {{"rho", s.rho},
          {"sigma", s.sigma},
          {"alpha", s.alpha},
          {"eps_abs", s.eps_abs},
          {"eps_rel", s.eps_rel},
          {"eps_prim_inf", s.eps_prim_inf},
          {"max_iter", s.max_iter},
          {"check_interval", s.check_interval},
          {"adaptive_rho", s.adaptive_rho},
          {"adaptive_rho_interval", s.adaptive_rho_interval},
          {"adaptive_rho_tolerance", s.adaptive_rho_tolerance},
          {"scaling_iters", s.scaling_iters},
          {"polish", s.polish},
          {"polish_refine_iters", s.polish_refine_iters},
          {"polish_delta", s.polish_delta}};
}

/// Bounds are given as numbers or the strings "inf" / "-inf".
inline MpcConfig mpc_config_from_json(const Json & j, MpcConfig c = {})
{
  check_keys(j,
             {"horizon", "Q", "R_u", "x_min", "x_max", "u_min", "u_max", "solver", "sqp_max_iter", "sqp_step_tol",
              "warm_start"},
             "mpc config");
  c.horizon = get_or(j, "horizon", c.horizon);
  if (j.contains("Q")) { c.Q = detail::weight_from_json(j.at("Q"), "Q"); }
  if (j.contains("R_u")) { c.R_u = detail::weight_from_json(j.at("R_u"), "R_u"); }
  if (j.contains("x_min")) { c.x_min = detail::bounds_from_json(j, "x_min"); }
  if (j.contains("x_max")) { c.x_max = detail::bounds_from_json(j, "x_max"); }
  if (j.contains("u_min")) { c.u_min = detail::bounds_from_json(j, "u_min"); }
  if (j.contains("u_max")) { c.u_max = detail::bounds_from_json(j, "u_max"); }
  if (j.contains("solver")) { c.solver = admm_settings_from_json(j.at("solver"), c.solver); }
  c.sqp_max_iter = get_or(j, "sqp_max_iter", c.sqp_max_iter);
  c.sqp_step_tol = get_or(j, "sqp_step_tol", c.sqp_step_tol);
  c.warm_start   = get_or(j, "warm_start", c.warm_start);
  return c;
}

inline Json mpc_config_to_json(const MpcConfig & c)
{
  return {{"horizon", c.horizon},
          {"Q", detail::weight_to_json(c.Q)},
          {"R_u", detail::weight_to_json(c.R_u)},
          {"x_min", detail::bounds_to_json(c.x_min)},
          {"x_max", detail::bounds_to_json(c.x_max)},
          {"u_min", detail::bounds_to_json(c.u_min)},
          {"u_max", detail::bounds_to_json(c.u_max)},
          {"solver", admm_settings_to_json(c.solver)},
          {"sqp_max_iter", c.sqp_max_iter},
          {"sqp_step_tol", c.sqp_step_tol},
          {"warm_start", c.warm_start}};
}

/// Position of each block inside the decision vector and the constraint rows.
struct MpcLayout
{
  int S = 0, p = 0, m = 0, n = 0;
  std::vector<int> x_rows;  ///< state channels with at least one finite bound
  std::vector<int> u_rows;  ///< input channels with at least one finite bound

  int num_vars() const { return S * p + S * m; }
  int z_offset(int k) const { return (k - 1) * p; }  ///< k = 1..S
  int u_offset(int k) const { return S * p + k * m; }  ///< k = 0..S-1
  int num_cons() const { return S * p + S * int(x_rows.size()) + S * int(u_rows.size()); }
  int dyn_row(int k) const { return k * p; }  ///< row block of z_{k+1} = ...
  int xbox_row(int k) const { return S * p + (k - 1) * int(x_rows.size()); }
  int ubox_row(int k) const { return S * p + S * int(x_rows.size()) + k * int(u_rows.size()); }
};

/// Per-step affine dynamics z_{k+1} = A_k z_k + F_k u_k + c_k, k = 0..S-1.
struct StackedDynamics
{
  std::vector<Matrix> A, F;
  std::vector<Vector> c;
};

/// Assemble the stacked QP. `x_ref` is n x S; column k-1 is the target for C z_k.
inline std::pair<QpProblem, MpcLayout> build_stacked_qp(
  const StackedDynamics & dyn, const Vector & z0, const Matrix & x_ref, const MpcConfig & cfg, int n)
{
  const int S = cfg.horizon;
  if (int(dyn.A.size()) != S || int(dyn.F.size()) != S || int(dyn.c.size()) != S) {
    throw DimensionError("mpc: dynamics list length differs from the horizon");
  }
  const int p = int(z0.size());
  const int m = int(dyn.F.front().cols());
  if (x_ref.rows() != n || x_ref.cols() < S) { throw DimensionError("mpc: reference slice must be n x S"); }
  if (!x_ref.leftCols(S).allFinite() || !z0.allFinite()) { throw DimensionError("mpc: non-finite reference or state"); }

  MpcLayout L{S, p, m, n, {}, {}};
  for (int i = 0; i < n; ++i) {
    if (std::isfinite(cfg.x_min(i)) || std::isfinite(cfg.x_max(i))) { L.x_rows.push_back(i); }
  }
  for (int i = 0; i < m; ++i) {
    if (std::isfinite(cfg.u_min(i)) || std::isfinite(cfg.u_max(i))) { L.u_rows.push_back(i); }
  }
  const int nv = L.num_vars(), nc = L.num_cons();

  // Cost. C = [I 0], so C'QC only touches the leading n x n block of each z_k.
  std::vector<Triplet> pt;
  Vector q = Vector::Zero(nv);
  for (int k = 1; k <= S; ++k) {
    const int o = L.z_offset(k);
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < n; ++i) { pt.emplace_back(o + i, o + j, 2 * cfg.Q(i, j)); }
    }
    q.segment(o, n) = -2 * cfg.Q * x_ref.col(k - 1);
  }
  for (int k = 0; k < S; ++k) {
    const int o = L.u_offset(k);
    for (int j = 0; j < m; ++j) {
      for (int i = 0; i < m; ++i) { pt.emplace_back(o + i, o + j, 2 * cfg.R_u(i, j)); }
    }
  }

  // Constraints. Every entry of A_k and F_k is inserted so the pattern is step-invariant.
  std::vector<Triplet> at;
  at.reserve(std::size_t(S) * std::size_t(p) * std::size_t(p + m + 1));
  Vector l(nc), u(nc);
  for (int k = 0; k < S; ++k) {
    const int r = L.dyn_row(k);
    if (dyn.A[std::size_t(k)].rows() != p || dyn.A[std::size_t(k)].cols() != p || dyn.F[std::size_t(k)].rows() != p
        || dyn.F[std::size_t(k)].cols() != m) {
      throw DimensionError("mpc: step dynamics have the wrong shape");
    }
    for (int i = 0; i < p; ++i) { at.emplace_back(r + i, L.z_offset(k + 1) + i, 1.0); }
    if (k > 0) {
      const Matrix & Ak = dyn.A[std::size_t(k)];
      for (int j = 0; j < p; ++j) {
        for (int i = 0; i < p; ++i) { at.emplace_back(r + i, L.z_offset(k) + j, -Ak(i, j)); }
      }
    }
    const Matrix & Fk = dyn.F[std::size_t(k)];
    for (int j = 0; j < m; ++j) {
      for (int i = 0; i < p; ++i) { at.emplace_back(r + i, L.u_offset(k) + j, -Fk(i, j)); }
    }
    Vector rhs = dyn.c[std::size_t(k)];
    if (k == 0) { rhs += dyn.A[0] * z0; }
    l.segment(r, p) = rhs;
    u.segment(r, p) = rhs;
  }
  for (int k = 1; k <= S; ++k) {
    for (std::size_t a = 0; a < L.x_rows.size(); ++a) {
      const int r = L.xbox_row(k) + int(a), ch = L.x_rows[a];
      at.emplace_back(r, L.z_offset(k) + ch, 1.0);
      l(r) = cfg.x_min(ch);
      u(r) = cfg.x_max(ch);
    }
  }
  for (int k = 0; k < S; ++k) {
    for (std::size_t a = 0; a < L.u_rows.size(); ++a) {
      const int r = L.ubox_row(k) + int(a), ch = L.u_rows[a];
      at.emplace_back(r, L.u_offset(k) + ch, 1.0);
      l(r) = cfg.u_min(ch);
      u(r) = cfg.u_max(ch);
    }
  }

  QpProblem qp;
  qp.P.resize(nv, nv);
  qp.P.setFromTriplets(pt.begin(), pt.end());
  qp.P.makeCompressed();
  qp.A.resize(nc, nv);
  qp.A.setFromTriplets(at.begin(), at.end());
  qp.A.makeCompressed();
  qp.q = q;
  qp.l = l;
  qp.u = u;
  qp.validate();
  return {std::move(qp), std::move(L)};
}

/// Stacked QP of the linear model with (A + dA, B + dB) at every step.
inline std::pair<QpProblem, MpcLayout> build_linear_mpc_qp(
  const KoopmanModel & model, const AdaptationDelta * delta, const Vector & z0, const Matrix & x_ref,
  const MpcConfig & cfg)
{
  if (model.mode != ModelMode::linear) { throw ConfigError("build_linear_mpc_qp: model is bilinear"); }
  require_size(z0, model.p, "mpc lifted state");
  const MpcConfig c = cfg.resolved(model.n, model.m);
  const auto [A, B] = delta ? effective_matrices(model, *delta) : std::pair<Matrix, Matrix>{model.A, model.B};
  StackedDynamics dyn;
  dyn.A.assign(std::size_t(c.horizon), A);
  dyn.F.assign(std::size_t(c.horizon), B);
  dyn.c.assign(std::size_t(c.horizon), Vector::Zero(model.p));
  return build_stacked_qp(dyn, z0, x_ref, c, model.n);
}

/// Jacobians of A z + B (z kron u) at (zb, ub): returns (A + sum_j ub_j B_j, [B_1 zb .. B_m zb], -B (zb kron ub)).
inline std::tuple<Matrix, Matrix, Vector> linearize_bilinear(
  const Matrix & A, const Matrix & B, const Vector & zb, const Vector & ub)
{
  const auto p = A.rows(), m = ub.size();
  Matrix Az = A;
  Matrix Fu(p, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    Matrix Bj(p, p);
    for (Eigen::Index i = 0; i < p; ++i) { Bj.col(i) = B.col(i * m + j); }
    Az += ub(j) * Bj;
    Fu.col(j) = Bj * zb;
  }
  return {Az, Fu, -B * kron(zb, ub)};
}

struct MpcSolution
{
  Vector u0;
  QpStatus status   = QpStatus::failure;
  bool degraded     = false;  ///< previous input was reused
  int iterations    = 0;      ///< ADMM iterations, summed over SQP passes
  int sqp_iterations = 0;
  double prim_res   = 0, dual_res = 0;
  double solve_ms   = 0;
  std::vector<double> sqp_residuals;  ///< bilinear dynamics violation after each SQP pass
  Vector z_plan, u_plan;              ///< stacked predicted lifted states (p*S) and inputs (m*S)
};

/// Receding-horizon controller holding the warm start and the previous input.
class MpcController
{
public:
  MpcController(const KoopmanModel & model, const MpcConfig & cfg)
    : model_(model), cfg_(cfg.resolved(model.n, model.m)), solver_(cfg_.solver)
  {
    reset();
  }

  const MpcConfig & config() const { return cfg_; }
  const KoopmanModel & model() const { return model_; }

  void reset()
  {
    u_prev_ = Vector::Zero(model_.m).cwiseMax(cfg_.u_min).cwiseMin(cfg_.u_max);
    x_warm_.reset();
    y_warm_.reset();
  }

  /// Solve for the lifted initial state z0 and reference slice (n x S).
  MpcSolution solve_lifted(const Vector & z0, const Matrix & x_ref, const AdaptationDelta * delta = nullptr)
  {
    const auto t0 = std::chrono::steady_clock::now();
    MpcSolution sol = model_.mode == ModelMode::linear ? solve_linear(z0, x_ref, delta) : solve_bilinear(z0, x_ref, delta);
    sol.solve_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return sol;
  }

  MpcSolution solve(const Vector & x0, const Matrix & x_ref, const AdaptationDelta * delta = nullptr)
  {
    return solve_lifted(lift(model_, x0), x_ref, delta);
  }

private:
  std::pair<Matrix, Matrix> effective(const AdaptationDelta * delta) const
  {
    if (!delta) { return {model_.A, model_.B}; }
    return effective_pair(*delta);
  }

  std::pair<Matrix, Matrix> effective_pair(const AdaptationDelta & d) const
  {
    if (d.dA.rows() != model_.p || d.dA.cols() != model_.p || d.dB.rows() != model_.p
        || d.dB.cols() != model_.b_cols()) {
      throw DimensionError("mpc: delta shape differs from the model");
    }
    return {model_.A + d.dA, model_.B + d.dB};
  }

  /// Previous solution shifted one step, last block repeated.
  static Vector shift_blocks(const Vector & v, int offset, int block, int count)
  {
    Vector out = v;
    if (count <= 0 || block <= 0) { return out; }
    for (int k = 0; k + 1 < count; ++k) { out.segment(offset + k * block, block) = v.segment(offset + (k + 1) * block, block); }
    return out;
  }

  Vector shifted_primal(const MpcLayout & L) const
  {
    Vector x = shift_blocks(*x_warm_, 0, L.p, L.S);
    return shift_blocks(x, L.u_offset(0), L.m, L.S);
  }

  Vector shifted_dual(const MpcLayout & L) const
  {
    Vector y = shift_blocks(*y_warm_, 0, L.p, L.S);
    y        = shift_blocks(y, L.xbox_row(1), int(L.x_rows.size()), L.S);
    return shift_blocks(y, L.ubox_row(0), int(L.u_rows.size()), L.S);
  }

  Vector clip_u(const Vector & u) const { return u.cwiseMax(cfg_.u_min).cwiseMin(cfg_.u_max); }

  MpcSolution solve_linear(const Vector & z0, const Matrix & x_ref, const AdaptationDelta * delta)
  {
    require_size(z0, model_.p, "mpc lifted state");
    const auto [A, B] = effective(delta);
    StackedDynamics dyn;
    dyn.A.assign(std::size_t(cfg_.horizon), A);
    dyn.F.assign(std::size_t(cfg_.horizon), B);
    dyn.c.assign(std::size_t(cfg_.horizon), Vector::Zero(model_.p));
    const auto [qp, L] = build_stacked_qp(dyn, z0, x_ref, cfg_, model_.n);

    std::optional<Vector> xw, yw;
    if (cfg_.warm_start && x_warm_ && x_warm_->size() == L.num_vars() && y_warm_->size() == L.num_cons()) {
      xw = shifted_primal(L);
      yw = shifted_dual(L);
    }
    const QpResult r = solver_.solve(qp, xw ? &*xw : nullptr, yw ? &*yw : nullptr);
    return finish(r, L);
  }

  MpcSolution finish(const QpResult & r, const MpcLayout & L)
  {
    MpcSolution sol;
    sol.status     = r.status;
    sol.iterations = r.iterations;
    sol.prim_res   = r.prim_res;
    sol.dual_res   = r.dual_res;
    const bool usable = (r.status == QpStatus::solved || r.status == QpStatus::max_iter) && r.x.size() == L.num_vars()
                        && r.x.allFinite();
    if (!usable) {
      sol.degraded = true;
      sol.u0       = u_prev_;
      x_warm_.reset();
      y_warm_.reset();
      return sol;
    }
    sol.z_plan = r.x.head(L.S * L.p);
    sol.u_plan = r.x.tail(L.S * L.m);
    sol.u0     = clip_u(r.x.segment(L.u_offset(0), L.m));
    u_prev_    = sol.u0;
    x_warm_    = r.x;
    y_warm_    = r.y;
    return sol;
  }

  /// max_k |z_{k+1} - A z_k - B (z_k kron u_k)| of a stacked iterate.
  double bilinear_violation(const Matrix & A, const Matrix & B, const Vector & z0, const Vector & x, const MpcLayout & L) const
  {
    double worst = 0;
    Vector zk    = z0;
    for (int k = 0; k < L.S; ++k) {
      const Vector uk = x.segment(L.u_offset(k), L.m);
      const Vector zn = x.segment(L.z_offset(k + 1), L.p);
      worst           = std::max(worst, (zn - A * zk - B * kron(zk, uk)).lpNorm<Eigen::Infinity>());
      zk              = zn;
    }
    return worst;
  }

  MpcSolution solve_bilinear(const Vector & z0, const Matrix & x_ref, const AdaptationDelta * delta)
  {
    require_size(z0, model_.p, "mpc lifted state");
    const auto [A, B] = effective(delta);
    const int S = cfg_.horizon, p = model_.p, m = model_.m;

    // Initial guess: previous inputs shifted (zeros first time), states from the bilinear rollout.
    Matrix ub(m, S);
    ub.setZero();
    if (cfg_.warm_start && x_warm_ && x_warm_->size() == S * (p + m)) {
      for (int k = 0; k < S; ++k) { ub.col(k) = x_warm_->segment(S * p + std::min(k + 1, S - 1) * m, m); }
    }
    for (int k = 0; k < S; ++k) { ub.col(k) = clip_u(ub.col(k)); }
    Matrix zb(p, S + 1);
    zb.col(0) = z0;
    for (int k = 0; k < S; ++k) { zb.col(k + 1) = A * zb.col(k) + B * kron(zb.col(k), ub.col(k)); }
    if (!zb.allFinite()) {
      zb.rightCols(S) = zb.col(0).replicate(1, S);
    }

    MpcSolution best;
    double best_violation = std::numeric_limits<double>::infinity();
    QpResult best_r;
    MpcLayout best_L;
    std::optional<Vector> xw, yw;
    int admm_iters = 0;
    bool converged = false;
    std::vector<double> violations;
    for (int it = 0; it < cfg_.sqp_max_iter; ++it) {
      StackedDynamics dyn;
      for (int k = 0; k < S; ++k) {
        auto [Ak, Fk, ck] = linearize_bilinear(A, B, zb.col(k), ub.col(k));
        dyn.A.push_back(std::move(Ak));
        dyn.F.push_back(std::move(Fk));
        dyn.c.push_back(std::move(ck));
      }
      const auto [qp, L] = build_stacked_qp(dyn, z0, x_ref, cfg_, model_.n);
      if (!xw) {
        Vector x0(L.num_vars());
        for (int k = 0; k < S; ++k) {
          x0.segment(L.z_offset(k + 1), p) = zb.col(k + 1);
          x0.segment(L.u_offset(k), m)     = ub.col(k);
        }
        xw = x0;
      }
      const QpResult r = solver_.solve(qp, &*xw, yw ? &*yw : nullptr);
      admm_iters += r.iterations;
      if (!(r.status == QpStatus::solved || r.status == QpStatus::max_iter) || !r.x.allFinite()) { break; }

      const double viol = bilinear_violation(A, B, z0, r.x, L);
      violations.push_back(viol);
      double step = 0;
      for (int k = 0; k < S; ++k) {
        step = std::max(step, (r.x.segment(L.u_offset(k), m) - ub.col(k)).lpNorm<Eigen::Infinity>());
        step = std::max(step, (r.x.segment(L.z_offset(k + 1), p) - zb.col(k + 1)).lpNorm<Eigen::Infinity>());
        ub.col(k)     = r.x.segment(L.u_offset(k), m);
        zb.col(k + 1) = r.x.segment(L.z_offset(k + 1), p);
      }
      xw = r.x;
      yw = r.y;
      if (viol <= best_violation || best_r.x.size() == 0) {
        best_violation = viol;
        best_r         = r;
        best_L         = L;
      }
      if (step < cfg_.sqp_step_tol) {
        converged = true;
        best_r    = r;
        best_L    = L;
        break;
      }
    }
    if (best_r.x.size() == 0) {
      best_r.status = QpStatus::failure;
      best_L        = MpcLayout{S, p, m, model_.n, {}, {}};
    }
    MpcSolution sol     = finish(best_r, best_L);
    sol.iterations      = admm_iters;
    sol.sqp_iterations  = int(violations.size());
    sol.sqp_residuals   = std::move(violations);
    sol.degraded        = sol.degraded || !converged;
    return sol;
  }

  KoopmanModel model_;
  MpcConfig cfg_;
  AdmmSolver solver_;
  Vector u_prev_;
  std::optional<Vector> x_warm_, y_warm_;
};

}  // namespace akmpc
