#pragma once

// Single-precision inference for the link networks, 16 points per call.
//
// The first layer is split into a point part and a configuration part; the
// latter (plus the bias) is folded into a per-configuration constant so a
// block only pays for three input columns. Softplus uses polynomial exp/log1p
// so the whole block vectorizes.

#include "ncedf/mlp.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace ncedf {

inline constexpr int kLanes = 16;

typedef float v16f __attribute__((vector_size(64)));
typedef std::int32_t v16i __attribute__((vector_size(64)));

inline v16f splat(float x) { return v16f{} + x; }

inline v16f vmax(v16f a, v16f b) { return a > b ? a : b; }
inline v16f vmin(v16f a, v16f b) { return a < b ? a : b; }

inline v16f vsqrt(v16f x) {
#if defined(__AVX512F__)
  return std::bit_cast<v16f>(_mm512_sqrt_ps(std::bit_cast<__m512>(x)));
#else
  v16f out;
  for (int i = 0; i < kLanes; ++i) out[i] = std::sqrt(x[i]);
  return out;
#endif
}

/// e^x for x <= 0 (inputs below -87 flush to 0).
inline v16f vexp_nonpositive(v16f x) {
  x = vmax(x, splat(-87.0f));
  const v16f kMagic = splat(12582912.0f);  // 1.5 * 2^23, rounds to nearest integer
  const v16f n = (x * 1.44269504088896341f + kMagic) - kMagic;
  v16f r = x - n * 0.693359375f;
  r = r - n * -2.12194440e-4f;
  v16f p = splat(1.9875691500e-4f);
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  const v16i bits = (__builtin_convertvector(n, v16i) + 127) << 23;
  v16f scale;
  std::memcpy(&scale, &bits, sizeof(scale));
  return p * scale;
}

/// 1 / x for x in [1, 4]; reciprocal estimate plus one Newton step where available.
inline v16f vrecip_small(v16f x) {
#if defined(__AVX512F__)
  const v16f r = std::bit_cast<v16f>(_mm512_rcp14_ps(std::bit_cast<__m512>(x)));
  return r * (2.0f - x * r);
#else
  return 1.0f / x;
#endif
}

/// ln(1 + t) for t in [0, 1] via 2 atanh(t / (2 + t)).
inline v16f vlog1p_unit(v16f t) {
  const v16f u = t * vrecip_small(t + 2.0f);
  const v16f u2 = u * u;
  v16f s = splat(1.0f / 13.0f);
  s = s * u2 + 1.0f / 11.0f;
  s = s * u2 + 1.0f / 9.0f;
  s = s * u2 + 1.0f / 7.0f;
  s = s * u2 + 1.0f / 5.0f;
  s = s * u2 + 1.0f / 3.0f;
  s = s * u2 + 1.0f;
  return 2.0f * u * s;
}

inline v16f vsoftplus(v16f x) {
  const v16f ax = vmax(x, -x);
  return vmax(x, splat(0.0f)) + vlog1p_unit(vexp_nonpositive(-ax));
}

/// Float copy of a link network laid out for block evaluation.
class FastMlp {
 public:
  static constexpr std::size_t kMaxWidth = 64;

  FastMlp() = default;

  explicit FastMlp(const MlpParams& params) : source_(params) {
    params.validate();
    if (params.layer_count() < 2) throw std::invalid_argument("FastMlp needs at least one hidden layer");
    for (std::size_t k = 0; k < params.layer_count(); ++k) {
      weights_.emplace_back(params.weights[k].begin(), params.weights[k].end());
      biases_.emplace_back(params.biases[k].begin(), params.biases[k].end());
    }
    for (std::size_t k = 1; k + 1 < params.dims.size(); ++k)
      if (params.dims[k] > kMaxWidth) throw std::invalid_argument("FastMlp supports hidden widths up to 64");
  }

  const MlpParams& params() const { return source_; }
  std::size_t first_width() const { return source_.dims[1]; }

  /// First-layer bias plus the contribution of (theta, cos phi, sin phi).
  void config_constants(const LinkConfig& q, float* out) const {
    const std::size_t width = first_width();
    const double enc[3] = {q.theta, std::cos(q.phi), std::sin(q.phi)};
    for (std::size_t o = 0; o < width; ++o) {
      const double* w = source_.weights[0].data() + o * kInputDim;
      out[o] = static_cast<float>(source_.biases[0][o] + w[3] * enc[0] + w[4] * enc[1] + w[5] * enc[2]);
    }
  }

  std::vector<float> config_constants(const LinkConfig& q) const {
    std::vector<float> c(first_width());
    config_constants(q, c.data());
    return c;
  }

  /// Network output for 16 link-frame points sharing one configuration.
  [[gnu::noinline]] v16f evaluate(const float* constants, v16f x, v16f y, v16f z) const {
    v16f buf_a[kMaxWidth], buf_b[kMaxWidth];
    v16f* a = buf_a;
    v16f* b = buf_b;

    const std::size_t w0 = first_width();
    const float* W = weights_[0].data();
    for (std::size_t o = 0; o < w0; ++o) {
      const float* row = W + o * kInputDim;
      a[o] = vsoftplus(constants[o] + row[0] * x + row[1] * y + row[2] * z);
    }
    const std::size_t last = weights_.size() - 1;
    for (std::size_t k = 1; k < last; ++k) {
      const std::size_t n_in = source_.dims[k], n_out = source_.dims[k + 1];
      const float* Wk = weights_[k].data();
      const float* bk = biases_[k].data();
      std::size_t o = 0;
      // Eight independent accumulators keep the FMA pipeline full.
      for (; o + 8 <= n_out; o += 8) dense8(Wk + o * n_in, bk + o, n_in, a, b + o);
      for (; o < n_out; ++o) b[o] = dot(Wk + o * n_in, bk[o], n_in, a);
      for (std::size_t j = 0; j < n_out; ++j) b[j] = vsoftplus(b[j]);
      std::swap(a, b);
    }
    return dot(weights_[last].data(), biases_[last][0], source_.dims[last], a);
  }

 private:
  static void dense8(const float* W, const float* bias, std::size_t n_in, const v16f* in, v16f* out) {
    v16f acc[8];
    for (int j = 0; j < 8; ++j) acc[j] = splat(bias[j]);
    for (std::size_t i = 0; i < n_in; ++i) {
      const v16f x = in[i];
      for (int j = 0; j < 8; ++j) acc[j] += W[static_cast<std::size_t>(j) * n_in + i] * x;
    }
    for (int j = 0; j < 8; ++j) out[j] = acc[j];
  }

  static v16f dot(const float* row, float bias, std::size_t n_in, const v16f* in) {
    v16f acc[4] = {splat(bias), splat(0.0f), splat(0.0f), splat(0.0f)};
    std::size_t i = 0;
    for (; i + 4 <= n_in; i += 4)
      for (std::size_t j = 0; j < 4; ++j) acc[j] += row[i + j] * in[i + j];
    for (; i < n_in; ++i) acc[0] += row[i] * in[i];
    return (acc[0] + acc[1]) + (acc[2] + acc[3]);
  }

  MlpParams source_;
  std::vector<std::vector<float>> weights_;
  std::vector<std::vector<float>> biases_;
};

}  // namespace ncedf
