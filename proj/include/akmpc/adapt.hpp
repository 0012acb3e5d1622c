#pragma once

/**
 * @file
 * @brief Online estimation of (dA, dB) from a sliding window of lifted prediction residuals.
 *
 * Residuals are dz_k = z_obs,k - z_hat_k, where z_hat_k is the one-step prediction from
 * (z_obs,k-1, u_k-1). The adaptor minimizes
 *
 *   mean_i |dz_i - dA z_i - dB v_i|^2 + b1 |dA|_1 + b2 |dB|_1 + b3 |dA|_F^2 + b4 |dB|_F^2
 *
 * over the window with a few warm-started Adam epochs per control step (v_i = u_i or kron(z_i, u_i)).
 */

#include <deque>
#include <optional>

#include "json_util.hpp"
#include "koopman.hpp"
#include "neural.hpp"

namespace akmpc {

struct AdaptConfig
{
  int window   = 4;
  int epochs   = 2;  ///< full-window Adam passes per control step
  double beta1 = 0.05, beta2 = 0.05;  ///< L1 on dA, dB
  double beta3 = 0.05, beta4 = 0.05;  ///< squared Frobenius on dA, dB
  AdamConfig adam{.lr = 1e-3};
  bool compounding = false;  ///< accumulate each step's delta into the model instead of replacing it
  /// Adam runs on dA diag(s) with s the model's input scale on the base-state columns, so the step
  /// per entry shrinks for widely spread channels. The loss is unchanged.
  bool scale_columns = true;

  void validate() const
  {
    if (window < 1) { throw ConfigError("adapt: window must be >= 1"); }
    if (epochs < 0) { throw ConfigError("adapt: epochs must be >= 0"); }
    for (double b : {beta1, beta2, beta3, beta4}) {
      if (!(b >= 0)) { throw ConfigError("adapt: regularization weights must be >= 0"); }
    }
    if (!(adam.lr > 0)) { throw ConfigError("adapt: learning rate must be > 0"); }
  }
};

inline AdaptConfig adapt_config_from_json(const Json & j, AdaptConfig c = {})
{
  check_keys(j, {"window", "epochs", "beta", "lr", "adam_beta1", "adam_beta2", "adam_eps", "compounding", "scale_columns"},
             "adapt config");
  c.window = get_or(j, "window", c.window);
  c.epochs = get_or(j, "epochs", c.epochs);
  if (j.contains("beta")) {
    const auto b = get_or<std::vector<double>>(j, "beta", {});
    if (b.size() != 4) { throw ConfigError("adapt: beta needs 4 entries [b1, b2, b3, b4]"); }
    c.beta1 = b[0];
    c.beta2 = b[1];
    c.beta3 = b[2];
    c.beta4 = b[3];
  }
  c.adam.lr    = get_or(j, "lr", c.adam.lr);
  c.adam.beta1 = get_or(j, "adam_beta1", c.adam.beta1);
  c.adam.beta2 = get_or(j, "adam_beta2", c.adam.beta2);
  c.adam.eps   = get_or(j, "adam_eps", c.adam.eps);
  c.compounding   = get_or(j, "compounding", c.compounding);
  c.scale_columns = get_or(j, "scale_columns", c.scale_columns);
  c.validate();
  return c;
}

inline Json adapt_config_to_json(const AdaptConfig & c)
{
  return {{"window", c.window},       {"epochs", c.epochs},          {"beta", {c.beta1, c.beta2, c.beta3, c.beta4}},
          {"lr", c.adam.lr},          {"adam_beta1", c.adam.beta1}, {"adam_beta2", c.adam.beta2},
          {"adam_eps", c.adam.eps},   {"compounding", c.compounding}, {"scale_columns", c.scale_columns}};
}

struct ResidualRecord
{
  Vector z_prev;  ///< lifted observation the prediction started from
  Vector u_prev;  ///< input applied over the predicted step
  Vector dz;      ///< z_obs - z_hat
};

/// Ring buffer of the most recent residual records.
class AdaptationWindow
{
public:
  explicit AdaptationWindow(int capacity = 1) : capacity_(capacity)
  {
    if (capacity < 1) { throw ConfigError("adaptation window capacity must be >= 1"); }
  }

  /**
   * @brief Register the observation at step k.
   *
   * @param z_obs  lifted observation at step k
   * @param u_prev input applied between steps k-1 and k
   * @param z_hat  prediction of z_obs made from the previous observation and u_prev
   *
   * The first call only stores z_obs; later calls append (previous z_obs, u_prev, z_obs - z_hat).
   */
  void record_step(const Vector & z_obs, const Vector & u_prev, const Vector & z_hat)
  {
    if (z_hat.size() != z_obs.size()) { throw DimensionError("record_step: z_hat and z_obs differ in length"); }
    if (last_z_) {
      if (last_z_->size() != z_obs.size()) { throw DimensionError("record_step: lifted length changed"); }
      records_.push_back({*last_z_, u_prev, z_obs - z_hat});
      if (int(records_.size()) > capacity_) { records_.pop_front(); }
    }
    last_z_ = z_obs;
  }

  /// Direct insertion of a record (synthetic windows, tests).
  void push(ResidualRecord r)
  {
    records_.push_back(std::move(r));
    if (int(records_.size()) > capacity_) { records_.pop_front(); }
  }

  void clear()
  {
    records_.clear();
    last_z_.reset();
  }

  int capacity() const { return capacity_; }
  int size() const { return int(records_.size()); }
  bool full() const { return size() >= capacity_; }
  const std::deque<ResidualRecord> & records() const { return records_; }

  /// Stacked regressors [z_i] (p x w), inputs (m x w) and residuals (p x w).
  void stacked(Matrix & Z, Matrix & U, Matrix & D) const
  {
    if (records_.empty()) {
      Z.resize(0, 0);
      U.resize(0, 0);
      D.resize(0, 0);
      return;
    }
    const auto w = Eigen::Index(records_.size());
    Z.resize(records_.front().z_prev.size(), w);
    U.resize(records_.front().u_prev.size(), w);
    D.resize(records_.front().dz.size(), w);
    for (Eigen::Index i = 0; i < w; ++i) {
      Z.col(i) = records_[std::size_t(i)].z_prev;
      U.col(i) = records_[std::size_t(i)].u_prev;
      D.col(i) = records_[std::size_t(i)].dz;
    }
  }

private:
  int capacity_;
  std::deque<ResidualRecord> records_;
  std::optional<Vector> last_z_;
};

namespace detail {

inline Matrix window_regressor(ModelMode mode, const Matrix & Z, const Matrix & U)
{
  if (mode == ModelMode::linear) { return U; }
  Matrix V(Z.rows() * U.rows(), Z.cols());
  for (Eigen::Index i = 0; i < Z.cols(); ++i) { V.col(i) = kron(Z.col(i), U.col(i)); }
  return V;
}

}  // namespace detail

/**
 * @brief Unregularized least-squares delta over the window.
 *
 * Solves min |D - [dA dB] Phi|_F with Phi = [Z; V] through the normal equations when Phi Phi^T is
 * well conditioned, and through the minimum-norm complete orthogonal decomposition otherwise.
 */
inline AdaptationDelta least_squares_oracle(const AdaptationWindow & win, ModelMode mode, int p, int m)
{
  const int bcols = mode == ModelMode::linear ? m : p * m;
  AdaptationDelta d{Matrix::Zero(p, p), Matrix::Zero(p, bcols)};
  if (win.size() == 0) { return d; }
  Matrix Z, U, D;
  win.stacked(Z, U, D);
  if (Z.rows() != p || U.rows() != m) { throw DimensionError("least_squares_oracle: window shape differs from model"); }
  Matrix Phi(p + bcols, Z.cols());
  Phi << Z, detail::window_regressor(mode, Z, U);

  Matrix K;
  const Matrix G = Phi * Phi.transpose();
  const Eigen::LDLT<Matrix> ldlt(G);
  const Vector diag = ldlt.vectorD().cwiseAbs();
  const bool well_conditioned = ldlt.info() == Eigen::Success && Phi.cols() >= Phi.rows()
                                && diag.minCoeff() > 1e-10 * std::max(diag.maxCoeff(), 1e-300);
  if (well_conditioned) {
    K = ldlt.solve(Phi * D.transpose()).transpose();
  } else {
    K = Phi.transpose().completeOrthogonalDecomposition().solve(D.transpose()).transpose();
  }
  d.dA = K.leftCols(p);
  d.dB = K.rightCols(bcols);
  return d;
}

inline AdaptationDelta least_squares_oracle(const AdaptationWindow & win, const KoopmanModel & model)
{
  return least_squares_oracle(win, model.mode, model.p, model.m);
}

/// (A + dA, B + dB); the model itself is left untouched.
inline std::pair<Matrix, Matrix> effective_matrices(const KoopmanModel & model, const AdaptationDelta & delta)
{
  if (delta.dA.rows() != model.p || delta.dA.cols() != model.p || delta.dB.rows() != model.p
      || delta.dB.cols() != model.b_cols()) {
    throw DimensionError("effective_matrices: delta shape differs from the model");
  }
  return {model.A + delta.dA, model.B + delta.dB};
}

/// Per-step diagnostics of the adaptor.
struct AdaptLog
{
  double residual_norm = 0;  ///< |dz| of the newest record
  double loss          = 0;  ///< window loss after the update
  bool fault           = false;
};

/**
 * @brief Warm-started Adam estimator of (dA, dB).
 *
 * The L1 terms are applied as a proximal step with Adam's per-coordinate step size, which keeps
 * exact zeros. Until the window holds `window` records the delta is zero. Any non-finite value
 * resets the delta and optimizer state to zero.
 */
class Adaptor
{
public:
  Adaptor() = default;
  Adaptor(ModelMode mode, int p, int m, AdaptConfig cfg) : mode_(mode), p_(p), m_(m), cfg_(cfg)
  {
    cfg_.validate();
    reset();
  }
  Adaptor(const KoopmanModel & model, AdaptConfig cfg) : Adaptor(model.mode, model.p, model.m, cfg)
  {
    if (cfg_.scale_columns) {
      col_a_.head(model.n) = model.input_scale;
      if (mode_ == ModelMode::bilinear) {
        for (int i = 0; i < model.n; ++i) { col_b_.segment(Eigen::Index(i) * m_, m_).setConstant(model.input_scale(i)); }
      }
    }
  }

  const AdaptConfig & config() const { return cfg_; }
  const AdaptLog & last_log() const { return log_; }

  void reset()
  {
    const int bcols = mode_ == ModelMode::linear ? m_ : p_ * m_;
    step_           = {Matrix::Zero(p_, p_), Matrix::Zero(p_, bcols)};
    total_          = step_;
    raw_            = step_;
    if (col_a_.size() != p_) { col_a_ = Vector::Ones(p_); }
    if (col_b_.size() != bcols) { col_b_ = Vector::Ones(bcols); }
    adam_           = {};
    adam_.cfg       = cfg_.adam;
  }

  /// Delta handed to the controller: the latest estimate, or the running sum when compounding.
  const AdaptationDelta & delta() const { return cfg_.compounding ? total_ : step_; }

  /// Window loss for a candidate delta (smooth and L1 parts).
  double loss(const AdaptationWindow & win, const AdaptationDelta & d) const
  {
    if (win.size() == 0) { return 0; }
    Matrix Z, U, D;
    win.stacked(Z, U, D);
    const Matrix R = D - d.dA * Z - d.dB * detail::window_regressor(mode_, Z, U);
    return R.squaredNorm() / double(Z.cols()) + cfg_.beta1 * d.dA.cwiseAbs().sum() + cfg_.beta2 * d.dB.cwiseAbs().sum()
           + cfg_.beta3 * d.dA.squaredNorm() + cfg_.beta4 * d.dB.squaredNorm();
  }

  /// One control step of adaptation; returns the delta to use now.
  const AdaptationDelta & update(const AdaptationWindow & win)
  {
    log_ = {};
    if (win.size() > 0) { log_.residual_norm = win.records().back().dz.norm(); }
    if (!win.full()) {
      log_.loss = loss(win, step_);
      return delta();
    }
    Matrix Z, U, D;
    win.stacked(Z, U, D);
    if (Z.rows() != p_ || U.rows() != m_) { throw DimensionError("adapt: window shape differs from model"); }
    const Matrix V  = detail::window_regressor(mode_, Z, U);
    const double w  = double(Z.cols());

    Matrix gA, gB;
    for (int e = 0; e < cfg_.epochs; ++e) {
      const Matrix R = D - step_.dA * Z - step_.dB * V;
      gA             = (-2.0 / w) * R * Z.transpose() + 2 * cfg_.beta3 * step_.dA;
      gB             = (-2.0 / w) * R * V.transpose() + 2 * cfg_.beta4 * step_.dB;
      adam_prox_step(gA * col_a_.asDiagonal(), gB * col_b_.asDiagonal());
      step_.dA = raw_.dA * col_a_.asDiagonal();
      step_.dB = raw_.dB * col_b_.asDiagonal();
    }
    log_.loss = loss(win, step_);
    if (!std::isfinite(log_.loss) || !step_.dA.allFinite() || !step_.dB.allFinite()) {
      reset();
      log_.fault = true;
      return delta();
    }
    if (cfg_.compounding) {
      total_.dA += step_.dA;
      total_.dB += step_.dB;
    }
    return delta();
  }

private:
  void adam_prox_step(const Matrix & gA, const Matrix & gB)
  {
    if (adam_.m.empty()) {
      adam_.m = {Vector::Zero(gA.size()), Vector::Zero(gB.size())};
      adam_.v = adam_.m;
    }
    ++adam_.step;
    const auto & c  = adam_.cfg;
    const double c1 = 1.0 - std::pow(c.beta1, double(adam_.step));
    const double c2 = 1.0 - std::pow(c.beta2, double(adam_.step));
    auto apply      = [&](Matrix & W, const Matrix & g, std::size_t slot, double l1, const Vector & col) {
      Eigen::Map<Vector> w(W.data(), W.size());
      Eigen::Map<const Vector> gv(g.data(), g.size());
      adam_.m[slot] = c.beta1 * adam_.m[slot] + (1 - c.beta1) * gv;
      adam_.v[slot] = c.beta2 * adam_.v[slot] + (1 - c.beta2) * gv.cwiseAbs2();
      const Vector eta = c.lr / ((adam_.v[slot].array() / c2).sqrt() + c.eps);
      w.array() -= eta.array() * adam_.m[slot].array() / c1;
      if (l1 > 0) {
        Matrix thr_m = Eigen::Map<const Matrix>(eta.data(), W.rows(), W.cols()) * (l1 * col).asDiagonal();
        const Eigen::Map<const Vector> thr(thr_m.data(), thr_m.size());
        w = w.array().sign() * (w.array().abs() - thr.array()).max(0.0);
      }
    };
    apply(raw_.dA, gA, 0, cfg_.beta1, col_a_);
    apply(raw_.dB, gB, 1, cfg_.beta2, col_b_);
  }

  ModelMode mode_ = ModelMode::linear;
  int p_ = 0, m_ = 0;
  AdaptConfig cfg_;
  AdaptationDelta step_, total_;
  AdaptationDelta raw_;  ///< Adam coordinates: step_ = raw_ diag(col)
  Vector col_a_, col_b_;
  AdamState adam_;
  AdaptLog log_;
};

}  // namespace akmpc
