#pragma once

/**
 * @file
 * @brief Lifted linear / bilinear models, their prediction kernels, and the JSON model file.
 *
 * Lifted state layout: z = [x; psi(x); 1], where the trailing constant channel is optional.
 * The projection C = [I_n | 0] is fixed, so project(z) is simply the first n entries.
 *
 * Kronecker ordering is z-major: kron(z, u)[i * m + j] = z_i * u_j. In bilinear mode B has p * m
 * columns laid out the same way, so column block j (columns {i * m + j}) multiplies u_j.
 */

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "neural.hpp"
#include "types.hpp"

namespace akmpc {

enum class ModelMode { linear, bilinear };

inline std::string to_string(ModelMode m) { return m == ModelMode::linear ? "linear" : "bilinear"; }

inline ModelMode mode_from_string(const std::string & s)
{
  if (s == "linear") { return ModelMode::linear; }
  if (s == "bilinear") { return ModelMode::bilinear; }
  throw ConfigError("unknown model mode '" + s + "'");
}

inline constexpr int kModelFormatVersion = 1;

struct KoopmanModel
{
  ModelMode mode = ModelMode::linear;
  int n = 0, m = 0, p = 0;
  bool constant_channel = false;

  Mlp lifting_net;      ///< input n, output p - n - (constant_channel ? 1 : 0)
  Vector input_offset;  ///< network input is (x - offset) .* scale
  Vector input_scale;

  Matrix A, B, C;

  int lifted_features() const { return p - n - (constant_channel ? 1 : 0); }
  int b_cols() const { return mode == ModelMode::linear ? m : p * m; }

  /// Structural check; throws SchemaError.
  void validate() const
  {
    if (n <= 0 || m <= 0 || p < n + (constant_channel ? 1 : 0)) { throw SchemaError("model: bad dimensions"); }
    if (A.rows() != p || A.cols() != p) { throw SchemaError("model: A must be p x p"); }
    if (B.rows() != p || B.cols() != b_cols()) { throw SchemaError("model: B has the wrong shape for its mode"); }
    if (C.rows() != n || C.cols() != p) { throw SchemaError("model: C must be n x p"); }
    if (!has_identity_projection()) { throw SchemaError("model: C must equal [I | 0]"); }
    if (input_offset.size() != n || input_scale.size() != n) { throw SchemaError("model: input scaling size"); }
    if (lifted_features() > 0) {
      lifting_net.validate();
      if (lifting_net.input_dim() != n || lifting_net.output_dim() != lifted_features()) {
        throw SchemaError("model: lifting network widths do not match (n, p)");
      }
    } else if (lifting_net.num_layers() != 0) {
      throw SchemaError("model: lifting network present but p leaves no lifted features");
    }
    if (!A.allFinite() || !B.allFinite()) { throw SchemaError("model: non-finite matrices"); }
  }

  bool has_identity_projection() const
  {
    Matrix expect = Matrix::Zero(n, p);
    expect.leftCols(n).setIdentity();
    return C.rows() == n && C.cols() == p && C == expect;
  }
};

/// [I_n | 0_{n x (p - n)}]
inline Matrix identity_projection(int n, int p)
{
  Matrix C = Matrix::Zero(n, p);
  C.leftCols(n).setIdentity();
  return C;
}

/// Model with zero A, B, identity projection and an untrained network of the given hidden widths.
inline KoopmanModel make_model(
  ModelMode mode, int n, int m, int p, std::span<const Eigen::Index> hidden, bool constant_channel, Rng & rng)
{
  KoopmanModel model;
  model.mode             = mode;
  model.n                = n;
  model.m                = m;
  model.p                = p;
  model.constant_channel = constant_channel;
  const int features     = model.lifted_features();
  if (features < 0) { throw ConfigError("make_model: p too small for n and the constant channel"); }
  if (features > 0) {
    std::vector<Eigen::Index> sizes{n};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(features);
    model.lifting_net = make_mlp(sizes, rng, Activation::tanh);
  }
  model.input_offset = Vector::Zero(n);
  model.input_scale  = Vector::Ones(n);
  model.A            = Matrix::Zero(p, p);
  model.B            = Matrix::Zero(p, model.b_cols());
  model.C            = identity_projection(n, p);
  if (constant_channel) { model.A(p - 1, p - 1) = 1.0; }
  return model;
}

/// Correction to the nominal (A, B).
struct AdaptationDelta
{
  Matrix dA, dB;

  static AdaptationDelta zero(const KoopmanModel & model)
  {
    return {Matrix::Zero(model.p, model.p), Matrix::Zero(model.p, model.b_cols())};
  }
};

// ---------------------------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------------------------

/// z-major Kronecker product of two vectors.
inline Vector kron(const Vector & z, const Vector & u)
{
  Vector out(z.size() * u.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) { out.segment(i * u.size(), u.size()) = z(i) * u; }
  return out;
}

/// Scaled network input for a batch of states (n x B).
inline Matrix network_input(const KoopmanModel & model, const Matrix & X)
{
  return (X.colwise() - model.input_offset).array().colwise() * model.input_scale.array();
}

/// Lift a batch of states (n x B) to (p x B). Fills `tape` for the network part when given.
inline Matrix lift_batch(const KoopmanModel & model, const Matrix & X, Tape * tape = nullptr)
{
  if (X.rows() != model.n) { throw DimensionError("lift: state has the wrong length"); }
  Matrix Z(model.p, X.cols());
  Z.topRows(model.n) = X;
  const int f = model.lifted_features();
  if (f > 0) { Z.middleRows(model.n, f) = forward(model.lifting_net, network_input(model, X), tape); }
  if (model.constant_channel) { Z.row(model.p - 1).setOnes(); }
  return Z;
}

inline Vector lift(const KoopmanModel & model, const Vector & x)
{
  require_size(x, model.n, "lift");
  return lift_batch(model, Matrix(x)).col(0);
}

/// Input term of the dynamics: u (linear) or kron(z, u) (bilinear).
inline Vector input_regressor(const KoopmanModel & model, const Vector & z, const Vector & u)
{
  return model.mode == ModelMode::linear ? u : kron(z, u);
}

/// (A + dA) z + (B + dB) u, or with kron(z, u) in bilinear mode. No delta means nominal.
inline Vector predict(
  const KoopmanModel & model, const Vector & z, const Vector & u, const AdaptationDelta * delta = nullptr)
{
  require_size(z, model.p, "predict lifted state");
  require_size(u, model.m, "predict input");
  const Vector v = input_regressor(model, z, u);
  if (!delta) { return model.A * z + model.B * v; }
  if (delta->dA.rows() != model.p || delta->dA.cols() != model.p || delta->dB.rows() != model.p
      || delta->dB.cols() != model.b_cols()) {
    throw DimensionError("predict: adaptation delta shape differs from the model");
  }
  Vector out = model.A * z + model.B * v;
  out.noalias() += delta->dA * z;
  out.noalias() += delta->dB * v;
  return out;
}

inline Vector project(const KoopmanModel & model, const Vector & z)
{
  require_size(z, model.p, "project");
  return z.head(model.n);
}

// ---------------------------------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------------------------------

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix & M)
{
  std::vector<double> data;
  data.reserve(M.size());
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    for (Eigen::Index j = 0; j < M.cols(); ++j) { data.push_back(M(i, j)); }
  }
  return {{"rows", M.rows()}, {"cols", M.cols()}, {"data", data}};
}

inline Matrix matrix_from_json(const nlohmann::json & j, const char * what)
{
  const auto rows = j.at("rows").get<Eigen::Index>(), cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || Eigen::Index(data.size()) != rows * cols) {
    throw SchemaError(std::string("model file: matrix '") + what + "' has inconsistent size");
  }
  Matrix M(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j2 = 0; j2 < cols; ++j2) { M(i, j2) = data[std::size_t(i * cols + j2)]; }
  }
  return M;
}

inline Vector vector_from_json(const nlohmann::json & j)
{
  const auto d = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(d.data(), Eigen::Index(d.size()));
}

inline std::vector<double> to_std(const Vector & v) { return {v.data(), v.data() + v.size()}; }

}  // namespace detail

inline nlohmann::json model_to_json(const KoopmanModel & model)
{
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < model.lifting_net.num_layers(); ++l) {
    layers.push_back({
      {"activation", to_string(model.lifting_net.activations[l])},
      {"weights", detail::matrix_to_json(model.lifting_net.weights[l])},
      {"biases", detail::to_std(model.lifting_net.biases[l])},
    });
  }
  return {
    {"format_version", kModelFormatVersion},
    {"mode", to_string(model.mode)},
    {"n", model.n},
    {"m", model.m},
    {"p", model.p},
    {"constant_channel", model.constant_channel},
    {"input_offset", detail::to_std(model.input_offset)},
    {"input_scale", detail::to_std(model.input_scale)},
    {"A", detail::matrix_to_json(model.A)},
    {"B", detail::matrix_to_json(model.B)},
    {"C", detail::matrix_to_json(model.C)},
    {"lifting_net", {{"layers", layers}}},
  };
}

inline KoopmanModel model_from_json(const nlohmann::json & j)
{
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kModelFormatVersion) {
      throw SchemaError("model file: unsupported format_version " + std::to_string(version));
    }
    KoopmanModel model;
    model.mode             = mode_from_string(j.at("mode").get<std::string>());
    model.n                = j.at("n").get<int>();
    model.m                = j.at("m").get<int>();
    model.p                = j.at("p").get<int>();
    model.constant_channel = j.at("constant_channel").get<bool>();
    model.input_offset     = detail::vector_from_json(j.at("input_offset"));
    model.input_scale      = detail::vector_from_json(j.at("input_scale"));
    model.A                = detail::matrix_from_json(j.at("A"), "A");
    model.B                = detail::matrix_from_json(j.at("B"), "B");
    model.C                = detail::matrix_from_json(j.at("C"), "C");
    for (const auto & layer : j.at("lifting_net").at("layers")) {
      model.lifting_net.activations.push_back(activation_from_string(layer.at("activation").get<std::string>()));
      model.lifting_net.weights.push_back(detail::matrix_from_json(layer.at("weights"), "weights"));
      model.lifting_net.biases.push_back(detail::vector_from_json(layer.at("biases")));
    }
    model.validate();
    return model;
  } catch (const nlohmann::json::exception & e) {
    throw SchemaError(std::string("model file: ") + e.what());
  } catch (const ConfigError & e) {
    throw SchemaError(std::string("model file: ") + e.what());
  }
}

inline void save_model(const KoopmanModel & model, const std::filesystem::path & path)
{
  model.validate();
  std::ofstream out(path);
  if (!out) { throw std::runtime_error("cannot write model file " + path.string()); }
  out << model_to_json(model).dump(1) << '\n';
}

inline KoopmanModel load_model(const std::filesystem::path & path)
{
  std::ifstream in(path);
  if (!in) { throw std::runtime_error("cannot open model file " + path.string()); }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception & e) {
    throw SchemaError("model file " + path.string() + " is corrupted: " + e.what());
  }
  return model_from_json(j);
}

}  // namespace akmpc
