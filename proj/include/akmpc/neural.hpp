#pragma once

/**
 * @file
 * @brief Small dense-network engine: batched forward pass, reverse-mode gradients, Adam, and a
 * central finite-difference gradient used as a test oracle.
 *
 * Batches are stored column-wise: an input batch is (in x B).
 */

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "random.hpp"
#include "types.hpp"

namespace akmpc {

enum class Activation { tanh, linear };

inline std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "linear"; }

inline Activation activation_from_string(const std::string & s)
{
  if (s == "tanh") { return Activation::tanh; }
  if (s == "linear") { return Activation::linear; }
  throw SchemaError("unknown activation '" + s + "'");
}

struct Mlp
{
  std::vector<Matrix> weights;  ///< layer l: (out_l x in_l)
  std::vector<Vector> biases;
  std::vector<Activation> activations;

  Eigen::Index input_dim() const { return weights.empty() ? 0 : weights.front().cols(); }
  Eigen::Index output_dim() const { return weights.empty() ? 0 : weights.back().rows(); }
  std::size_t num_layers() const { return weights.size(); }

  std::vector<Eigen::Index> layer_sizes() const
  {
    std::vector<Eigen::Index> s;
    if (weights.empty()) { return s; }
    s.push_back(input_dim());
    for (const auto & W : weights) { s.push_back(W.rows()); }
    return s;
  }

  Eigen::Index num_params() const
  {
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) { k += weights[l].size() + biases[l].size(); }
    return k;
  }

  /// Throws SchemaError if layer shapes are inconsistent or entries are non-finite.
  void validate() const
  {
    if (weights.size() != biases.size() || weights.size() != activations.size()) {
      throw SchemaError("mlp: layer list lengths differ");
    }
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (biases[l].size() != weights[l].rows()) { throw SchemaError("mlp: bias/weight mismatch"); }
      if (l > 0 && weights[l].cols() != weights[l - 1].rows()) {
        throw SchemaError("mlp: consecutive layer widths differ");
      }
      if (!weights[l].allFinite() || !biases[l].allFinite()) { throw SchemaError("mlp: non-finite entries"); }
    }
  }
};

/**
 * @brief Build a network with the given widths.
 *
 * Hidden layers use tanh; the last layer uses `output_activation`. Weights are drawn from
 * U(-sqrt(6/(fan_in+fan_out)), +sqrt(...)), biases start at zero.
 */
inline Mlp make_mlp(std::span<const Eigen::Index> sizes, Rng & rng, Activation output_activation = Activation::tanh)
{
  if (sizes.size() < 2) { throw ConfigError("make_mlp: need at least input and output widths"); }
  Mlp net;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const auto in = sizes[l], out = sizes[l + 1];
    const double r = std::sqrt(6.0 / double(in + out));
    Matrix W(out, in);
    for (Eigen::Index j = 0; j < W.cols(); ++j) {
      for (Eigen::Index i = 0; i < W.rows(); ++i) { W(i, j) = uniform(rng, -r, r); }
    }
    net.weights.push_back(std::move(W));
    net.biases.push_back(Vector::Zero(out));
    net.activations.push_back(l + 2 == sizes.size() ? output_activation : Activation::tanh);
  }
  return net;
}

inline Mlp make_mlp(std::initializer_list<Eigen::Index> sizes, Rng & rng, Activation out = Activation::tanh)
{
  return make_mlp(std::span<const Eigen::Index>(sizes.begin(), sizes.size()), rng, out);
}

/// Activations kept from a forward pass; outputs[0] is the input batch.
struct Tape
{
  const Mlp * net = nullptr;
  std::vector<Matrix> outputs;
};

struct MlpGradients
{
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
  Matrix input;
};

inline Matrix forward(const Mlp & net, const Matrix & X, Tape * tape = nullptr)
{
  if (X.rows() != net.input_dim()) {
    throw DimensionError(
      "mlp forward: input has " + std::to_string(X.rows()) + " rows, network expects "
      + std::to_string(net.input_dim()));
  }
  if (tape) {
    tape->net = &net;
    tape->outputs.clear();
    tape->outputs.push_back(X);
  }
  Matrix h = X;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    Matrix a = net.weights[l] * h;
    a.colwise() += net.biases[l];
    if (net.activations[l] == Activation::tanh) { a = a.array().tanh(); }
    h = std::move(a);
    if (tape) { tape->outputs.push_back(h); }
  }
  return h;
}

inline Vector forward(const Mlp & net, const Vector & x)
{
  return forward(net, Matrix(x)).col(0);
}

/// Gradients of sum_b <upstream_b, y_b> with respect to every parameter and the input batch.
inline MlpGradients backward(const Mlp & net, const Tape & tape, const Matrix & upstream)
{
  if (tape.net != &net || tape.outputs.size() != net.num_layers() + 1) {
    throw std::logic_error("mlp backward: tape does not belong to this network");
  }
  const Matrix & y = tape.outputs.back();
  if (upstream.rows() != y.rows() || upstream.cols() != y.cols()) {
    throw DimensionError("mlp backward: upstream shape differs from output");
  }

  MlpGradients g;
  g.weights.resize(net.num_layers());
  g.biases.resize(net.num_layers());

  Matrix delta = upstream;
  for (std::size_t l = net.num_layers(); l-- > 0;) {
    const Matrix & out = tape.outputs[l + 1];
    if (net.activations[l] == Activation::tanh) {
      delta.array() *= (1.0 - out.array().square());
    }
    g.weights[l] = delta * tape.outputs[l].transpose();
    g.biases[l]  = delta.rowwise().sum();
    delta        = net.weights[l].transpose() * delta;
  }
  g.input = std::move(delta);
  return g;
}

// ---------------------------------------------------------------------------------------------
// Parameter views
// ---------------------------------------------------------------------------------------------

/// Contiguous parameter block with its gradient.
struct ParamBlock
{
  double * value;
  const double * grad;
  Eigen::Index size;
};

inline Vector flatten(const Mlp & net)
{
  Vector p(net.num_params());
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    p.segment(k, net.weights[l].size()) = net.weights[l].reshaped();
    k += net.weights[l].size();
    p.segment(k, net.biases[l].size()) = net.biases[l];
    k += net.biases[l].size();
  }
  return p;
}

inline void unflatten(const Vector & p, Mlp & net)
{
  if (p.size() != net.num_params()) { throw DimensionError("unflatten: parameter count mismatch"); }
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    net.weights[l].reshaped() = p.segment(k, net.weights[l].size());
    k += net.weights[l].size();
    net.biases[l] = p.segment(k, net.biases[l].size());
    k += net.biases[l].size();
  }
}

inline Vector flatten(const MlpGradients & g)
{
  Eigen::Index n = 0;
  for (std::size_t l = 0; l < g.weights.size(); ++l) { n += g.weights[l].size() + g.biases[l].size(); }
  Vector p(n);
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < g.weights.size(); ++l) {
    p.segment(k, g.weights[l].size()) = g.weights[l].reshaped();
    k += g.weights[l].size();
    p.segment(k, g.biases[l].size()) = g.biases[l];
    k += g.biases[l].size();
  }
  return p;
}

// ---------------------------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------------------------

struct AdamConfig
{
  double lr    = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps   = 1e-8;
};

struct AdamState
{
  AdamConfig cfg;
  std::vector<Vector> m, v;  ///< one accumulator per parameter block
  long step = 0;

  void reset()
  {
    m.clear();
    v.clear();
    step = 0;
  }
};

/// One Adam update over all blocks. Moment buffers are created on first use.
inline void adam_step(std::span<const ParamBlock> blocks, AdamState & s)
{
  if (s.m.empty()) {
    for (const auto & b : blocks) {
      s.m.push_back(Vector::Zero(b.size));
      s.v.push_back(Vector::Zero(b.size));
    }
  }
  if (s.m.size() != blocks.size()) { throw DimensionError("adam_step: block count changed"); }

  ++s.step;
  const double c1 = 1.0 - std::pow(s.cfg.beta1, double(s.step));
  const double c2 = 1.0 - std::pow(s.cfg.beta2, double(s.step));

  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto & b = blocks[i];
    if (s.m[i].size() != b.size) { throw DimensionError("adam_step: block shape changed"); }
    Eigen::Map<Vector> p(b.value, b.size);
    Eigen::Map<const Vector> g(b.grad, b.size);
    s.m[i] = s.cfg.beta1 * s.m[i] + (1 - s.cfg.beta1) * g;
    s.v[i] = s.cfg.beta2 * s.v[i] + (1 - s.cfg.beta2) * g.cwiseAbs2();
    p.array() -= s.cfg.lr * (s.m[i].array() / c1) / ((s.v[i].array() / c2).sqrt() + s.cfg.eps);
  }
}

inline std::vector<ParamBlock> param_blocks(Mlp & net, const MlpGradients & g)
{
  std::vector<ParamBlock> blocks;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    blocks.push_back({net.weights[l].data(), g.weights[l].data(), net.weights[l].size()});
    blocks.push_back({net.biases[l].data(), g.biases[l].data(), net.biases[l].size()});
  }
  return blocks;
}

// ---------------------------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------------------------

/// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h for every coordinate.
inline Vector finite_diff_grad(const std::function<double(const Vector &)> & loss, const Vector & params, double h)
{
  if (!(h > 0)) { throw ConfigError("finite_diff_grad: h must be > 0"); }
  Vector g(params.size());
  Vector p = params;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double orig = p(i);
    p(i)              = orig + h;
    const double fp   = loss(p);
    p(i)              = orig - h;
    const double fm   = loss(p);
    p(i)              = orig;
    g(i)              = (fp - fm) / (2 * h);
  }
  return g;
}

}  // namespace akmpc
