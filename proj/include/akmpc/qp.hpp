#pragma once

/**
 * @file
 * @brief Operator-splitting (ADMM) solver for convex QPs
 *
 *   min 1/2 x'Px + q'x   s.t.  l <= A x <= u
 *
 * with Ruiz equilibration, over-relaxation, per-row penalties, residual-balancing rho updates,
 * primal infeasibility detection and active-set polishing.
 */

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <chrono>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "types.hpp"

namespace akmpc {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::ColMajor, int>;
using Triplet      = Eigen::Triplet<double, int>;

struct QpProblem
{
  SparseMatrix P;  ///< symmetric PSD, both triangles stored
  Vector q;
  SparseMatrix A;
  Vector l, u;  ///< +-infinity allowed

  Eigen::Index num_vars() const { return q.size(); }
  Eigen::Index num_cons() const { return l.size(); }

  void validate() const
  {
    const auto n = q.size();
    if (P.rows() != n || P.cols() != n) { throw DimensionError("qp: P must be n x n"); }
    if (A.cols() != n || A.rows() != l.size() || u.size() != l.size()) {
      throw DimensionError("qp: constraint shapes disagree");
    }
    for (Eigen::Index i = 0; i < l.size(); ++i) {
      if (std::isnan(l(i)) || std::isnan(u(i)) || l(i) > u(i)) {
        throw ConfigError("qp: constraint row " + std::to_string(i) + " has l > u");
      }
    }
  }
};

enum class QpStatus { solved, max_iter, primal_infeasible_suspected, failure };

inline std::string to_string(QpStatus s)
{
  switch (s) {
    case QpStatus::solved: return "solved";
    case QpStatus::max_iter: return "max_iter";
    case QpStatus::primal_infeasible_suspected: return "primal_infeasible_suspected";
    case QpStatus::failure: return "failure";
  }
  return "failure";
}

struct AdmmSettings
{
  double rho     = 0.1;
  double sigma   = 1e-6;
  double alpha   = 1.6;  ///< over-relaxation
  double eps_abs = 1e-6;
  double eps_rel = 1e-6;
  double eps_prim_inf = 1e-5;
  int max_iter        = 4000;
  int check_interval  = 1;   ///< residuals are evaluated every this many iterations
  bool adaptive_rho   = true;
  int adaptive_rho_interval   = 25;
  double adaptive_rho_tolerance = 5.0;  ///< refactor only when rho changes by more than this factor
  int scaling_iters   = 10;  ///< Ruiz passes, 0 disables
  bool polish         = true;
  int polish_refine_iters = 3;
  double polish_delta     = 1e-6;

  void validate() const
  {
    if (!(rho > 0) || !(sigma > 0)) { throw ConfigError("admm: rho and sigma must be > 0"); }
    if (!(alpha > 0 && alpha < 2)) { throw ConfigError("admm: alpha must lie in (0, 2)"); }
    if (!(eps_abs >= 0) || !(eps_rel >= 0) || eps_abs + eps_rel <= 0) { throw ConfigError("admm: bad tolerances"); }
    if (max_iter < 1 || check_interval < 1 || adaptive_rho_interval < 1) { throw ConfigError("admm: bad iteration counts"); }
  }
};

struct QpResult
{
  Vector x, y, z;  ///< primal, constraint duals, A x estimate
  QpStatus status  = QpStatus::failure;
  int iterations   = 0;
  double prim_res  = std::numeric_limits<double>::infinity();
  double dual_res  = std::numeric_limits<double>::infinity();
  double objective = std::numeric_limits<double>::quiet_NaN();
  double rho       = 0;
  bool polished    = false;
  double solve_ms  = 0;
};

/// Unscaled residuals of a primal-dual pair: |Ax - proj(Ax)|_inf and |Px + q + A'y|_inf.
inline std::pair<double, double> qp_residuals(const QpProblem & qp, const Vector & x, const Vector & y)
{
  const Vector Ax = qp.A * x;
  const Vector pr = Ax - Ax.cwiseMax(qp.l).cwiseMin(qp.u);
  const Vector dr = qp.P * x + qp.q + qp.A.transpose() * y;
  return {pr.size() ? pr.lpNorm<Eigen::Infinity>() : 0.0, dr.size() ? dr.lpNorm<Eigen::Infinity>() : 0.0};
}

/// ADMM solver that keeps the symbolic KKT factorization while the sparsity pattern is unchanged.
class AdmmSolver
{
public:
  explicit AdmmSolver(AdmmSettings s = {}) : s_(s) { s_.validate(); }

  const AdmmSettings & settings() const { return s_; }
  AdmmSettings & settings() { return s_; }

  /// Optional warm start in original (unscaled) coordinates.
  QpResult solve(const QpProblem & qp, const Vector * x_warm = nullptr, const Vector * y_warm = nullptr)
  {
    const auto t0 = std::chrono::steady_clock::now();
    qp.validate();
    QpResult res = iterate(qp, x_warm, y_warm);
    res.solve_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return res;
  }

private:
  static constexpr double kInfBound = 1e20;
  static constexpr double kRhoMin   = 1e-6;
  static constexpr double kRhoMax   = 1e6;
  static constexpr double kEqFactor = 1e3;

  // Scaled problem data.
  SparseMatrix Ps_, As_;
  Vector qs_, ls_, us_, D_, E_;
  double c_ = 1;

  Vector rho_vec_;
  Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower> ldlt_;
  SparseMatrix kkt_;
  std::vector<int> kkt_outer_, kkt_inner_;
  AdmmSettings s_;

  static double clamp_norm(double v) { return v < 1e-4 ? 1.0 : std::min(v, 1e4); }

  void scale(const QpProblem & qp)
  {
    const auto n = qp.num_vars(), mc = qp.num_cons();
    Ps_ = qp.P;
    As_ = qp.A;
    qs_ = qp.q;
    ls_ = qp.l.cwiseMax(-kInfBound);
    us_ = qp.u.cwiseMin(kInfBound);
    D_  = Vector::Ones(n);
    E_  = Vector::Ones(mc);
    c_  = 1;
    for (int it = 0; it < s_.scaling_iters; ++it) {
      Vector dcol = Vector::Zero(n), erow = Vector::Zero(mc);
      for (int k = 0; k < Ps_.outerSize(); ++k) {
        for (SparseMatrix::InnerIterator e(Ps_, k); e; ++e) { dcol(k) = std::max(dcol(k), std::abs(e.value())); }
      }
      for (int k = 0; k < As_.outerSize(); ++k) {
        for (SparseMatrix::InnerIterator e(As_, k); e; ++e) {
          dcol(k)       = std::max(dcol(k), std::abs(e.value()));
          erow(e.row()) = std::max(erow(e.row()), std::abs(e.value()));
        }
      }
      const Vector dk = dcol.unaryExpr([](double v) { return 1.0 / std::sqrt(clamp_norm(v)); });
      const Vector ek = erow.unaryExpr([](double v) { return 1.0 / std::sqrt(clamp_norm(v)); });
      Ps_ = dk.asDiagonal() * Ps_ * dk.asDiagonal();
      As_ = ek.asDiagonal() * As_ * dk.asDiagonal();
      qs_ = dk.cwiseProduct(qs_);
      D_  = D_.cwiseProduct(dk);
      E_  = E_.cwiseProduct(ek);

      // Cost scaling keeps the objective gradient of order one.
      double pmean = 0;
      Vector pcol  = Vector::Zero(n);
      for (int k = 0; k < Ps_.outerSize(); ++k) {
        for (SparseMatrix::InnerIterator e(Ps_, k); e; ++e) { pcol(k) = std::max(pcol(k), std::abs(e.value())); }
      }
      pmean           = n ? pcol.mean() : 1.0;
      const double qn = n ? qs_.lpNorm<Eigen::Infinity>() : 0.0;
      const double ck = 1.0 / clamp_norm(std::max(pmean, qn));
      Ps_ *= ck;
      qs_ *= ck;
      c_ *= ck;
    }
    for (Eigen::Index i = 0; i < mc; ++i) {
      ls_(i) = qp.l(i) <= -kInfBound ? -kInfBound : qp.l(i) * E_(i);
      us_(i) = qp.u(i) >= kInfBound ? kInfBound : qp.u(i) * E_(i);
    }
  }

  void set_rho_vector(const QpProblem & qp, double rho)
  {
    rho_vec_.resize(qp.num_cons());
    for (Eigen::Index i = 0; i < qp.num_cons(); ++i) {
      const bool lo_inf = qp.l(i) <= -kInfBound, up_inf = qp.u(i) >= kInfBound;
      if (lo_inf && up_inf) {
        rho_vec_(i) = kRhoMin;
      } else if (qp.u(i) - qp.l(i) < 1e-12 * std::max(1.0, std::abs(qp.l(i)))) {
        rho_vec_(i) = kEqFactor * rho;
      } else {
        rho_vec_(i) = rho;
      }
    }
  }

  /// Assemble the lower triangle of [P + sigma I, A'; A, -diag(1/rho)] and factorize.
  bool factorize()
  {
    const auto n = Ps_.rows(), mc = As_.rows();
    std::vector<Triplet> t;
    t.reserve(std::size_t(Ps_.nonZeros() + As_.nonZeros() + n + mc));
    for (int k = 0; k < Ps_.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator e(Ps_, k); e; ++e) {
        if (e.row() > k) { t.emplace_back(int(e.row()), k, e.value()); }
      }
    }
    const Vector pdiag = Ps_.diagonal();
    for (int i = 0; i < n; ++i) { t.emplace_back(i, i, pdiag(i) + s_.sigma); }
    for (int k = 0; k < As_.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator e(As_, k); e; ++e) { t.emplace_back(int(n + e.row()), k, e.value()); }
    }
    for (int i = 0; i < mc; ++i) { t.emplace_back(int(n + i), int(n + i), -1.0 / rho_vec_(i)); }
    kkt_.resize(n + mc, n + mc);
    kkt_.setFromTriplets(t.begin(), t.end());
    kkt_.makeCompressed();
    const std::vector<int> outer(kkt_.outerIndexPtr(), kkt_.outerIndexPtr() + kkt_.outerSize() + 1);
    const std::vector<int> inner(kkt_.innerIndexPtr(), kkt_.innerIndexPtr() + kkt_.nonZeros());
    if (outer != kkt_outer_ || inner != kkt_inner_) {
      ldlt_.analyzePattern(kkt_);
      kkt_outer_ = outer;
      kkt_inner_ = inner;
    }
    ldlt_.factorize(kkt_);
    return ldlt_.info() == Eigen::Success;
  }

  double objective(const QpProblem & qp, const Vector & x) const { return 0.5 * x.dot(qp.P * x) + qp.q.dot(x); }

  /// Active-set refinement of the ADMM estimate (scaled coordinates).
  bool polish(const QpProblem & qp, const Vector & zs, const Vector & ys, QpResult & res)
  {
    const auto n = Ps_.rows(), mc = As_.rows();
    std::vector<int> active;
    std::vector<double> target;
    for (int i = 0; i < mc; ++i) {
      if (zs(i) - ls_(i) < -ys(i) && ls_(i) > -kInfBound) {
        active.push_back(i);
        target.push_back(ls_(i));
      } else if (us_(i) - zs(i) < ys(i) && us_(i) < kInfBound) {
        active.push_back(i);
        target.push_back(us_(i));
      }
    }
    const auto na = Eigen::Index(active.size());
    std::vector<int> slot(std::size_t(mc), -1);
    for (int k = 0; k < na; ++k) { slot[std::size_t(active[std::size_t(k)])] = k; }

    std::vector<Triplet> t, t0;
    for (int k = 0; k < Ps_.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator e(Ps_, k); e; ++e) {
        if (e.row() >= k) { t0.emplace_back(int(e.row()), k, e.value()); }
      }
    }
    for (int k = 0; k < As_.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator e(As_, k); e; ++e) {
        const int r = slot[std::size_t(e.row())];
        if (r >= 0) { t0.emplace_back(int(n + r), k, e.value()); }
      }
    }
    t = t0;
    for (int i = 0; i < n; ++i) { t.emplace_back(i, i, s_.polish_delta); }
    for (int i = 0; i < na; ++i) { t.emplace_back(int(n + i), int(n + i), -s_.polish_delta); }
    SparseMatrix K(n + na, n + na), K0(n + na, n + na);
    K.setFromTriplets(t.begin(), t.end());
    K0.setFromTriplets(t0.begin(), t0.end());
    Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower> f(K);
    if (f.info() != Eigen::Success) { return false; }
    Vector rhs(n + na);
    rhs.head(n) = -qs_;
    for (int k = 0; k < na; ++k) { rhs(n + k) = target[std::size_t(k)]; }
    Vector sol = f.solve(rhs);
    for (int r = 0; r < s_.polish_refine_iters; ++r) {
      const Vector resid = rhs - K0.selfadjointView<Eigen::Lower>() * sol;
      sol += f.solve(resid);
    }
    if (!sol.allFinite()) { return false; }

    Vector yp = Vector::Zero(mc);
    for (int k = 0; k < na; ++k) { yp(active[std::size_t(k)]) = sol(n + k); }
    const Vector x = D_.cwiseProduct(sol.head(n));
    const Vector y = E_.cwiseProduct(yp) / c_;
    // Sign consistency: lower-active rows need y <= 0, upper-active rows y >= 0.
    for (int k = 0; k < na; ++k) {
      const int i      = active[std::size_t(k)];
      const bool lower = target[std::size_t(k)] == ls_(i);
      const bool upper = target[std::size_t(k)] == us_(i);
      if ((lower && !upper && y(i) > 1e-9 * std::max(1.0, y.lpNorm<Eigen::Infinity>()))
          || (upper && !lower && y(i) < -1e-9 * std::max(1.0, y.lpNorm<Eigen::Infinity>()))) {
        return false;
      }
    }
    const auto [pr, dr] = qp_residuals(qp, x, y);
    const auto [eps_p, eps_d] = tolerances(qp, x, y);
    if (!(pr <= std::max(eps_p, res.prim_res) && dr <= std::max(eps_d, res.dual_res))) { return false; }
    res.x        = x;
    res.y        = y;
    res.z        = (qp.A * x).cwiseMax(qp.l).cwiseMin(qp.u);
    res.prim_res = pr;
    res.dual_res = dr;
    res.polished = true;
    return true;
  }

  std::pair<double, double> tolerances(const QpProblem & qp, const Vector & x, const Vector & y) const
  {
    const auto inf = [](const Vector & v) { return v.size() ? v.lpNorm<Eigen::Infinity>() : 0.0; };
    const Vector Ax  = qp.A * x;
    const double zn  = inf(Ax.cwiseMax(qp.l).cwiseMin(qp.u));
    const double ep  = s_.eps_abs + s_.eps_rel * std::max(inf(Ax), zn);
    const double ed  = s_.eps_abs
                      + s_.eps_rel * std::max({inf(qp.P * x), inf(Vector(qp.A.transpose() * y)), inf(qp.q)});
    return {ep, ed};
  }

  QpResult iterate(const QpProblem & qp, const Vector * x_warm, const Vector * y_warm)
  {
    const auto n = qp.num_vars(), mc = qp.num_cons();
    QpResult res;
    scale(qp);
    double rho = s_.rho;
    set_rho_vector(qp, rho);
    if (!factorize()) {
      res.status = QpStatus::failure;
      return res;
    }

    Vector x = Vector::Zero(n), z = Vector::Zero(mc), y = Vector::Zero(mc);
    if (x_warm && x_warm->size() == n && x_warm->allFinite()) {
      x = x_warm->cwiseQuotient(D_);
      z = (As_ * x).cwiseMax(ls_).cwiseMin(us_);
    }
    if (y_warm && y_warm->size() == mc && y_warm->allFinite()) { y = c_ * y_warm->cwiseQuotient(E_); }

    Vector rhs(n + mc), xt(n), zt(mc), y_prev(mc), x_prev(n);
    const auto inf = [](const Vector & v) { return v.size() ? v.lpNorm<Eigen::Infinity>() : 0.0; };

    for (int k = 1; k <= s_.max_iter; ++k) {
      x_prev = x;
      y_prev = y;
      rhs.head(n)  = s_.sigma * x - qs_;
      rhs.tail(mc) = z - y.cwiseQuotient(rho_vec_);
      const Vector sol = ldlt_.solve(rhs);
      xt = sol.head(n);
      zt = z + (sol.tail(mc) - y).cwiseQuotient(rho_vec_);
      x  = s_.alpha * xt + (1 - s_.alpha) * x_prev;
      const Vector zr = s_.alpha * zt + (1 - s_.alpha) * z;
      const Vector zn = (zr + y.cwiseQuotient(rho_vec_)).cwiseMax(ls_).cwiseMin(us_);
      y += rho_vec_.cwiseProduct(zr - zn);
      z = zn;
      res.iterations = k;

      if (!x.allFinite() || !y.allFinite()) {
        res.status = QpStatus::failure;
        return res;
      }

      const bool check = k % s_.check_interval == 0 || k == s_.max_iter;
      const bool adapt = s_.adaptive_rho && k % s_.adaptive_rho_interval == 0;
      if (!check && !adapt) { continue; }

      // Unscaled residuals.
      const Vector xu = D_.cwiseProduct(x);
      const Vector yu = E_.cwiseProduct(y) / c_;
      const Vector zu = z.cwiseQuotient(E_);
      const Vector Ax  = qp.A * xu;
      const Vector Px  = qp.P * xu;
      const Vector Aty = qp.A.transpose() * yu;
      const double pr  = inf(Ax - zu);
      const double dr  = inf(Px + qp.q + Aty);
      const double eps_p = s_.eps_abs + s_.eps_rel * std::max(inf(Ax), inf(zu));
      const double eps_d = s_.eps_abs + s_.eps_rel * std::max({inf(Px), inf(Aty), inf(qp.q)});
      res.prim_res = pr;
      res.dual_res = dr;

      if (check && pr <= eps_p && dr <= eps_d) {
        res.status = QpStatus::solved;
        break;
      }
      if (check && mc > 0) {
        const Vector dy = E_.cwiseProduct(y - y_prev) / c_;
        const double dyn = inf(dy);
        if (dyn > 1e-12) {
          double support = 0;
          bool bounded   = true;
          for (Eigen::Index i = 0; i < mc; ++i) {
            if (dy(i) > 0) {
              if (qp.u(i) >= kInfBound) { bounded = bounded && dy(i) <= s_.eps_prim_inf * dyn; }
              else { support += qp.u(i) * dy(i); }
            } else if (dy(i) < 0) {
              if (qp.l(i) <= -kInfBound) { bounded = bounded && -dy(i) <= s_.eps_prim_inf * dyn; }
              else { support += qp.l(i) * dy(i); }
            }
          }
          const double atdy = inf(Vector(qp.A.transpose() * dy));
          if (bounded && atdy <= s_.eps_prim_inf * dyn && support < -s_.eps_prim_inf * dyn) {
            res.status = QpStatus::primal_infeasible_suspected;
            res.x      = xu;
            res.y      = dy / dyn;
            res.z      = zu;
            res.rho    = rho;
            return res;
          }
        }
      }
      if (adapt) {
        // Residual balancing in the scaled space.
        const Vector Axs = As_ * x;
        const Vector Pxs = Ps_ * x;
        const Vector Atys = As_.transpose() * y;
        const double prs = inf(Axs - z) / std::max({inf(Axs), inf(z), 1e-30});
        const double drs = inf(Pxs + qs_ + Atys) / std::max({inf(Pxs), inf(Atys), inf(qs_), 1e-30});
        if (prs > 0 && drs > 0) {
          const double rho_new = std::clamp(rho * std::sqrt(prs / drs), kRhoMin, kRhoMax);
          if (rho_new > rho * s_.adaptive_rho_tolerance || rho_new < rho / s_.adaptive_rho_tolerance) {
            rho = rho_new;
            set_rho_vector(qp, rho);
            if (!factorize()) {
              res.status = QpStatus::failure;
              return res;
            }
          }
        }
      }
    }
    if (res.status != QpStatus::solved) { res.status = QpStatus::max_iter; }

    res.x   = D_.cwiseProduct(x);
    res.y   = E_.cwiseProduct(y) / c_;
    res.z   = z.cwiseQuotient(E_);
    res.rho = rho;
    if (s_.polish && res.status == QpStatus::solved) {
      polish(qp, z, y, res);
    }
    res.objective = objective(qp, res.x);
    return res;
  }
};

inline QpResult admm_qp_solve(const QpProblem & qp, const AdmmSettings & settings = {},
                              const Vector * x_warm = nullptr, const Vector * y_warm = nullptr)
{
  AdmmSolver solver(settings);
  return solver.solve(qp, x_warm, y_warm);
}

/// Dense helper for building sparse matrices in tests and small problems.
inline SparseMatrix to_sparse(const Matrix & M)
{
  SparseMatrix S = M.sparseView(0.0, 0.0);
  S.makeCompressed();
  return S;
}

}  // namespace akmpc
