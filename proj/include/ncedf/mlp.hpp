#pragma once

// Softplus MLP for a single link's distance field, with its input gradient
// and the parameter gradient of the full training loss
//
//   l = mean (f - d)^2 + lambda_E mean (|grad_p f| - 1)^2 + lambda_O mean max(0, f - d)^2.
//
// The Eikonal term needs d|grad_p f|/dtheta. With v = grad_p f / |grad_p f|
// held fixed, |grad_p f| = v . grad_p f is the derivative of f along the input
// direction (v, 0, 0, 0), so a dual-number forward pass seeded with that
// direction carries it, and a reverse sweep over the dual-valued graph yields
// both df/dtheta (real part) and d|grad_p f|/dtheta (dual part).

#include "ncedf/datagen.hpp"
#include "ncedf/dual.hpp"
#include "ncedf/geometry.hpp"
#include "ncedf/kinematics.hpp"

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <type_traits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ncedf {

inline constexpr std::size_t kInputDim = 6;

/// `hidden_layers` hidden layers of `width` units each.
struct NetShape {
  std::size_t hidden_layers = 4;
  std::size_t width = 16;

  std::vector<std::size_t> layer_dims() const {
    std::vector<std::size_t> dims{kInputDim};
    dims.insert(dims.end(), hidden_layers, width);
    dims.push_back(1);
    return dims;
  }

  /// Parses "layers,width".
  static NetShape parse(const std::string& text) {
    const auto comma = text.find(',');
    if (comma == std::string::npos) throw std::invalid_argument("net shape must be \"layers,width\": " + text);
    NetShape s;
    try {
      std::size_t used = 0;
      const std::string a = text.substr(0, comma), b = text.substr(comma + 1);
      const long layers = std::stol(a, &used);
      if (used != a.size()) throw std::invalid_argument(a);
      const long width = std::stol(b, &used);
      if (used != b.size()) throw std::invalid_argument(b);
      if (layers < 1 || width < 1) throw std::invalid_argument(text);
      s.hidden_layers = static_cast<std::size_t>(layers);
      s.width = static_cast<std::size_t>(width);
    } catch (const std::logic_error&) {
      throw std::invalid_argument("net shape must be \"layers,width\" with positive integers: " + text);
    }
    return s;
  }
};

/// Layer k maps dims[k] -> dims[k+1]; weights[k] is row-major dims[k+1] x dims[k].
struct MlpParams {
  std::vector<std::size_t> dims;
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> biases;

  std::size_t layer_count() const { return weights.size(); }
  std::size_t in_dim(std::size_t k) const { return dims[k]; }
  std::size_t out_dim(std::size_t k) const { return dims[k + 1]; }

  static MlpParams zeros(std::span<const std::size_t> layer_dims) {
    if (layer_dims.size() < 2) throw std::invalid_argument("an MLP needs at least an input and an output layer");
    MlpParams p;
    p.dims.assign(layer_dims.begin(), layer_dims.end());
    for (std::size_t k = 0; k + 1 < p.dims.size(); ++k) {
      p.weights.emplace_back(p.dims[k + 1] * p.dims[k], 0.0);
      p.biases.emplace_back(p.dims[k + 1], 0.0);
    }
    return p;
  }

  MlpParams zeros_like() const { return zeros(dims); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < weights.size(); ++k) n += weights[k].size() + biases[k].size();
    return n;
  }

  /// Every parameter in layer order (weights then biases per layer).
  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (std::size_t k = 0; k < weights.size(); ++k) {
      out.insert(out.end(), weights[k].begin(), weights[k].end());
      out.insert(out.end(), biases[k].begin(), biases[k].end());
    }
    return out;
  }

  void unflatten(std::span<const double> flat) {
    if (flat.size() != parameter_count()) throw std::invalid_argument("unflatten: parameter count mismatch");
    std::size_t i = 0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
      for (auto& w : weights[k]) w = flat[i++];
      for (auto& b : biases[k]) b = flat[i++];
    }
  }

  void validate() const {
    if (dims.size() < 2 || weights.size() != dims.size() - 1 || biases.size() != weights.size())
      throw std::invalid_argument("MLP layer lists are inconsistent");
    if (dims.front() != kInputDim) throw std::invalid_argument("MLP input dimension must be 6");
    if (dims.back() != 1) throw std::invalid_argument("MLP output dimension must be 1");
    for (std::size_t k = 0; k < weights.size(); ++k) {
      if (dims[k] == 0) throw std::invalid_argument("MLP layer width must be positive");
      if (weights[k].size() != dims[k] * dims[k + 1] || biases[k].size() != dims[k + 1])
        throw std::invalid_argument("MLP layer " + std::to_string(k) + " has the wrong size");
    }
  }

  bool same_shape(const MlpParams& o) const { return dims == o.dims; }

  friend bool operator==(const MlpParams&, const MlpParams&) = default;
};

/// Glorot-uniform weights, zero biases.
template <class Urbg>
MlpParams glorot_init(std::span<const std::size_t> layer_dims, Urbg& rng) {
  MlpParams p = MlpParams::zeros(layer_dims);
  for (std::size_t k = 0; k < p.layer_count(); ++k) {
    const double limit = std::sqrt(6.0 / static_cast<double>(p.in_dim(k) + p.out_dim(k)));
    for (auto& w : p.weights[k]) w = -limit + 2.0 * limit * uniform01(rng);
  }
  return p;
}

using MlpInput = std::array<double, kInputDim>;

inline MlpInput encode_input(const Vec3& p, const LinkConfig& q) {
  return {p.x(), p.y(), p.z(), q.theta, std::cos(q.phi), std::sin(q.phi)};
}

namespace detail {

inline void check_input(const MlpParams& params, std::size_t n) {
  if (params.dims.empty() || n != params.dims.front())
    throw std::invalid_argument("MLP input has dimension " + std::to_string(n) + ", expected " +
                                (params.dims.empty() ? std::string("?") : std::to_string(params.dims.front())));
}

/// Scalar-typed forward pass; T may be double or Dual<double>.
template <class T>
T forward_scalar(const MlpParams& params, std::span<const T> input, std::vector<std::vector<T>>* trace = nullptr) {
  using std::exp;
  std::vector<T> h(input.begin(), input.end());
  if (trace) trace->assign(1, h);
  const std::size_t last = params.layer_count() - 1;
  for (std::size_t k = 0; k <= last; ++k) {
    const std::size_t n_in = params.in_dim(k), n_out = params.out_dim(k);
    std::vector<T> z(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
      T acc = T(params.biases[k][o]);
      for (std::size_t i = 0; i < n_in; ++i) acc += T(params.weights[k][o * n_in + i]) * h[i];
      z[o] = acc;
    }
    if (trace) trace->push_back(z);  // pre-activations
    if (k < last)
      for (auto& v : z) v = softplus(v);
    h = std::move(z);
  }
  return h[0];
}

}  // namespace detail

inline double mlp_forward(const MlpParams& params, std::span<const double> input) {
  detail::check_input(params, input.size());
  return detail::forward_scalar<double>(params, input);
}

inline double mlp_forward(const MlpParams& params, const MlpInput& input) {
  return mlp_forward(params, std::span<const double>(input));
}

/// Gradient of the output with respect to all inputs.
inline std::vector<double> mlp_full_input_gradient(const MlpParams& params, std::span<const double> input) {
  detail::check_input(params, input.size());
  std::vector<std::vector<double>> trace;
  detail::forward_scalar<double>(params, input, &trace);
  const std::size_t last = params.layer_count() - 1;
  std::vector<double> g(params.weights[last].begin(), params.weights[last].end());
  for (std::size_t k = last; k-- > 0;) {
    const std::size_t n_in = params.in_dim(k), n_out = params.out_dim(k);
    const auto& z = trace[k + 1];
    std::vector<double> prev(n_in, 0.0);
    for (std::size_t o = 0; o < n_out; ++o) {
      const double delta = g[o] * sigmoid(z[o]);
      for (std::size_t i = 0; i < n_in; ++i) prev[i] += params.weights[k][o * n_in + i] * delta;
    }
    g = std::move(prev);
  }
  return g;
}

/// Gradient with respect to the point coordinates (first three inputs).
inline Vec3 mlp_input_gradient(const MlpParams& params, std::span<const double> input) {
  const auto g = mlp_full_input_gradient(params, input);
  return {g[0], g[1], g[2]};
}

inline Vec3 mlp_input_gradient(const MlpParams& params, const MlpInput& input) {
  return mlp_input_gradient(params, std::span<const double>(input));
}

struct LossTerms {
  double total = 0.0;
  double distance = 0.0;
  double eikonal = 0.0;
  double overestimation = 0.0;
};

struct LossGradient {
  LossTerms loss;
  MlpParams grad;
};

struct LossWeights {
  double lambda_e = 0.05;
  double lambda_o = 2.0;
};

namespace detail {

inline void check_batch(const MlpParams& params, std::size_t n) {
  params.validate();
  if (n == 0) throw std::invalid_argument("loss needs a non-empty batch");
}

}  // namespace detail

/// Per-sample reference implementation built directly on Dual<double>:
/// a dual forward pass, then a reverse sweep in dual arithmetic. Slow; used as
/// an independent cross-check of the batched kernel below.
inline LossGradient loss_and_param_gradients_reference(const MlpParams& params, std::span<const TrainingSample> batch,
                                                       LossWeights weights) {
  detail::check_batch(params, batch.size());
  using D = Dual<double>;
  const auto inv_b = 1.0 / static_cast<double>(batch.size());
  LossGradient out{{}, params.zeros_like()};
  const std::size_t last = params.layer_count() - 1;

  for (const auto& s : batch) {
    const auto x = encode_input(s.p, s.q);
    const Vec3 g = mlp_input_gradient(params, x);
    const double gn = g.norm();
    const Vec3 v = gn > 0.0 ? Vec3(g / gn) : Vec3::Zero();

    std::vector<D> xd(kInputDim);
    for (std::size_t i = 0; i < kInputDim; ++i) xd[i] = D(x[i], i < 3 ? v[static_cast<Eigen::Index>(i)] : 0.0);
    std::vector<std::vector<D>> trace;
    const D f = detail::forward_scalar<D>(params, xd, &trace);

    const double e = f.re - s.d;
    const double over = std::max(0.0, e);
    out.loss.distance += e * e * inv_b;
    out.loss.eikonal += (gn - 1.0) * (gn - 1.0) * inv_b;
    out.loss.overestimation += over * over * inv_b;
    const double a = (2.0 * e + 2.0 * weights.lambda_o * over) * inv_b;
    const double b = 2.0 * weights.lambda_e * (gn - 1.0) * inv_b;

    // Reverse sweep in dual arithmetic; adj holds d f / d h for the current layer.
    std::vector<D> adj{D(1.0)};
    for (std::size_t k = last + 1; k-- > 0;) {
      const std::size_t n_in = params.in_dim(k), n_out = params.out_dim(k);
      const auto& z = trace[k + 1];
      const auto& z_prev = trace[k];
      std::vector<D> delta(n_out);
      for (std::size_t o = 0; o < n_out; ++o) delta[o] = k == last ? adj[o] : adj[o] * sigmoid(z[o]);
      std::vector<D> h_in(n_in);
      for (std::size_t i = 0; i < n_in; ++i) h_in[i] = k == 0 ? z_prev[i] : softplus(z_prev[i]);
      std::vector<D> next(n_in, D(0.0));
      for (std::size_t o = 0; o < n_out; ++o) {
        out.grad.biases[k][o] += a * delta[o].re + b * delta[o].du;
        for (std::size_t i = 0; i < n_in; ++i) {
          const D gw = delta[o] * h_in[i];
          out.grad.weights[k][o * n_in + i] += a * gw.re + b * gw.du;
          next[i] += D(params.weights[k][o * n_in + i]) * delta[o];
        }
      }
      adj = std::move(next);
    }
  }
  out.loss.total = out.loss.distance + weights.lambda_e * out.loss.eikonal + weights.lambda_o * out.loss.overestimation;
  return out;
}

/// Batched loss and gradient. The dual pass is stored as separate real and
/// dual matrices (one column per sample) and reuses the sigmoid values of the
/// plain forward pass.
class LossKernel {
 public:
  using Matrix = Eigen::MatrixXd;
  using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  LossGradient evaluate(const MlpParams& params, std::span<const TrainingSample> batch, LossWeights weights) {
    detail::check_batch(params, batch.size());
    const auto n = static_cast<Eigen::Index>(batch.size());
    const std::size_t layers = params.layer_count();
    const std::size_t last = layers - 1;
    resize(layers);

    h_[0].resize(kInputDim, n);
    for (Eigen::Index c = 0; c < n; ++c) {
      const auto x = encode_input(batch[static_cast<std::size_t>(c)].p, batch[static_cast<std::size_t>(c)].q);
      for (std::size_t i = 0; i < kInputDim; ++i) h_[0](static_cast<Eigen::Index>(i), c) = x[i];
    }

    for (std::size_t k = 0; k < last; ++k) {
      const RowMajorMap w = weight(params, k);
      z_[k].noalias() = w * h_[k];
      z_[k].colwise() += bias(params, k);
      s_[k] = z_[k].unaryExpr([](double v) { return sigmoid(v); });
      h_[k + 1] = z_[k].unaryExpr([](double v) { return softplus(v); });
    }
    Eigen::RowVectorXd f = weight(params, last) * h_[last];
    f.array() += params.biases[last][0];

    // Input gradient: reverse sweep seeded with 1 at the output.
    g_ = weight(params, last).transpose().replicate(1, n);
    for (std::size_t k = last; k-- > 0;) {
      g_ = weight(params, k).transpose() * (s_[k].cwiseProduct(g_));
    }
    const Matrix grad_p = g_.topRows(3);
    const Eigen::RowVectorXd gn = grad_p.colwise().norm();

    // Dual forward along (v, 0, 0, 0).
    hd_[0].setZero(kInputDim, n);
    for (Eigen::Index c = 0; c < n; ++c)
      if (gn(c) > 0.0) hd_[0].col(c).head<3>() = grad_p.col(c) / gn(c);
    for (std::size_t k = 0; k < last; ++k) {
      zd_[k].noalias() = weight(params, k) * hd_[k];
      hd_[k + 1] = s_[k].cwiseProduct(zd_[k]);
    }

    const double inv_b = 1.0 / static_cast<double>(n);
    LossGradient out{{}, params.zeros_like()};
    Eigen::RowVectorXd a(n), b(n);
    for (Eigen::Index c = 0; c < n; ++c) {
      const double e = f(c) - batch[static_cast<std::size_t>(c)].d;
      const double over = std::max(0.0, e);
      const double eik = gn(c) - 1.0;
      out.loss.distance += e * e;
      out.loss.eikonal += eik * eik;
      out.loss.overestimation += over * over;
      a(c) = (2.0 * e + 2.0 * weights.lambda_o * over) * inv_b;
      b(c) = 2.0 * weights.lambda_e * eik * inv_b;
    }
    out.loss.distance *= inv_b;
    out.loss.eikonal *= inv_b;
    out.loss.overestimation *= inv_b;
    out.loss.total = out.loss.distance + weights.lambda_e * out.loss.eikonal + weights.lambda_o * out.loss.overestimation;

    // Reverse sweep of J = sum_c a_c f_c + b_c fdual_c through the real and dual graphs.
    store(out.grad, last, a * h_[last].transpose() + b * hd_[last].transpose(), a.sum());
    adj_re_ = weight(params, last).transpose() * a;
    adj_du_ = weight(params, last).transpose() * b;
    for (std::size_t k = last; k-- > 0;) {
      d_du_ = s_[k].cwiseProduct(adj_du_);
      d_re_ = s_[k].cwiseProduct(adj_re_) +
              (s_[k].array() * (1.0 - s_[k].array()) * zd_[k].array() * adj_du_.array()).matrix();
      store(out.grad, k, d_re_ * h_[k].transpose() + d_du_ * hd_[k].transpose(), d_re_.rowwise().sum());
      if (k > 0) {
        adj_re_ = weight(params, k).transpose() * d_re_;
        adj_du_ = weight(params, k).transpose() * d_du_;
      }
    }
    return out;
  }

 private:
  static RowMajorMap weight(const MlpParams& p, std::size_t k) {
    return RowMajorMap(p.weights[k].data(), static_cast<Eigen::Index>(p.out_dim(k)),
                       static_cast<Eigen::Index>(p.in_dim(k)));
  }
  static Eigen::Map<const Eigen::VectorXd> bias(const MlpParams& p, std::size_t k) {
    return Eigen::Map<const Eigen::VectorXd>(p.biases[k].data(), static_cast<Eigen::Index>(p.out_dim(k)));
  }

  template <class WExpr, class BExpr>
  static void store(MlpParams& grad, std::size_t k, const WExpr& dw, const BExpr& db) {
    const Matrix w = dw;
    const std::size_t rows = grad.out_dim(k), cols = grad.in_dim(k);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        grad.weights[k][r * cols + c] = w(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    if constexpr (std::is_arithmetic_v<BExpr>) {
      grad.biases[k][0] = db;
    } else {
      const Eigen::VectorXd bv = db;
      for (std::size_t r = 0; r < rows; ++r) grad.biases[k][r] = bv(static_cast<Eigen::Index>(r));
    }
  }

  void resize(std::size_t layers) {
    h_.resize(layers);
    hd_.resize(layers);
    z_.resize(layers);
    zd_.resize(layers);
    s_.resize(layers);
  }

  std::vector<Matrix> h_, hd_, z_, zd_, s_;
  Matrix g_, adj_re_, adj_du_, d_re_, d_du_;
};

inline LossGradient loss_and_param_gradients(const MlpParams& params, std::span<const TrainingSample> batch,
                                             LossWeights weights) {
  LossKernel kernel;
  return kernel.evaluate(params, batch, weights);
}

/// Loss value only, straight from the definition; used for finite differences.
inline LossTerms loss_value(const MlpParams& params, std::span<const TrainingSample> batch, LossWeights weights) {
  detail::check_batch(params, batch.size());
  LossTerms t;
  for (const auto& s : batch) {
    const auto x = encode_input(s.p, s.q);
    const double e = mlp_forward(params, x) - s.d;
    const double gn = mlp_input_gradient(params, x).norm();
    t.distance += e * e;
    t.eikonal += (gn - 1.0) * (gn - 1.0);
    t.overestimation += std::max(0.0, e) * std::max(0.0, e);
  }
  const auto n = static_cast<double>(batch.size());
  t.distance /= n;
  t.eikonal /= n;
  t.overestimation /= n;
  t.total = t.distance + weights.lambda_e * t.eikonal + weights.lambda_o * t.overestimation;
  return t;
}

/// Forward pass over many inputs at once (double precision).
inline std::vector<double> mlp_forward_batch(const MlpParams& params, std::span<const TrainingSample> samples) {
  params.validate();
  std::vector<double> out(samples.size());
  constexpr std::size_t kChunk = 1024;
  const std::size_t last = params.layer_count() - 1;
  Eigen::MatrixXd h, z;
  for (std::size_t begin = 0; begin < samples.size(); begin += kChunk) {
    const std::size_t end = std::min(samples.size(), begin + kChunk);
    const auto n = static_cast<Eigen::Index>(end - begin);
    h.resize(kInputDim, n);
    for (Eigen::Index c = 0; c < n; ++c) {
      const auto& s = samples[begin + static_cast<std::size_t>(c)];
      const auto x = encode_input(s.p, s.q);
      for (std::size_t i = 0; i < kInputDim; ++i) h(static_cast<Eigen::Index>(i), c) = x[i];
    }
    for (std::size_t k = 0; k <= last; ++k) {
      const LossKernel::RowMajorMap w(params.weights[k].data(), static_cast<Eigen::Index>(params.out_dim(k)),
                                      static_cast<Eigen::Index>(params.in_dim(k)));
      z.noalias() = w * h;
      z.colwise() += Eigen::Map<const Eigen::VectorXd>(params.biases[k].data(), w.rows());
      if (k < last)
        h = z.unaryExpr([](double v) { return softplus(v); });
      else
        h = z;
    }
    for (Eigen::Index c = 0; c < n; ++c) out[begin + static_cast<std::size_t>(c)] = h(0, c);
  }
  return out;
}

struct AdamState {
  std::uint64_t step = 0;
  MlpParams m;
  MlpParams v;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_params(const MlpParams& p) { return {0, p.zeros_like(), p.zeros_like()}; }
};

inline void adam_step(MlpParams& params, const MlpParams& grads, AdamState& state, double lr) {
  if (!params.same_shape(grads) || !params.same_shape(state.m) || !params.same_shape(state.v))
    throw std::invalid_argument("adam_step: parameter, gradient and moment shapes differ");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  auto update = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
                    std::vector<double>& v) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps);
    }
  };
  for (std::size_t k = 0; k < params.layer_count(); ++k) {
    update(params.weights[k], grads.weights[k], state.m.weights[k], state.v.weights[k]);
    update(params.biases[k], grads.biases[k], state.m.biases[k], state.v.biases[k]);
  }
}

}  // namespace ncedf
