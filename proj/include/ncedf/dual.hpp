#pragma once

// Forward-mode dual numbers a + b·ε with ε² = 0.

#include <cmath>

namespace ncedf {

template <class T>
struct Dual {
  T re{};
  T du{};

  constexpr Dual() = default;
  constexpr Dual(T real) : re(real) {}  // NOLINT(google-explicit-constructor)
  constexpr Dual(T real, T dual) : re(real), du(dual) {}

  Dual& operator+=(const Dual& o) {
    re += o.re;
    du += o.du;
    return *this;
  }
  Dual& operator-=(const Dual& o) {
    re -= o.re;
    du -= o.du;
    return *this;
  }
  Dual& operator*=(const Dual& o) {
    du = du * o.re + re * o.du;
    re *= o.re;
    return *this;
  }

  friend Dual operator+(Dual a, const Dual& b) { return a += b; }
  friend Dual operator-(Dual a, const Dual& b) { return a -= b; }
  friend Dual operator*(Dual a, const Dual& b) { return a *= b; }
  friend Dual operator-(const Dual& a) { return {-a.re, -a.du}; }
  friend Dual operator/(const Dual& a, const Dual& b) {
    const T inv = T(1) / b.re;
    return {a.re * inv, (a.du * b.re - a.re * b.du) * inv * inv};
  }
};

template <class T>
Dual<T> exp(const Dual<T>& x) {
  using std::exp;
  const T e = exp(x.re);
  return {e, e * x.du};
}

template <class T>
Dual<T> log(const Dual<T>& x) {
  using std::log;
  return {log(x.re), x.du / x.re};
}

template <class T>
Dual<T> sqrt(const Dual<T>& x) {
  using std::sqrt;
  const T s = sqrt(x.re);
  return {s, x.du / (T(2) * s)};
}

/// ln(1 + e^x), switching to x + ln(1 + e^-x) above 20.
inline double softplus(double x) { return x > 20.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <class T>
Dual<T> softplus(const Dual<T>& x) {
  return {softplus(x.re), sigmoid(x.re) * x.du};
}

template <class T>
Dual<T> sigmoid(const Dual<T>& x) {
  const T s = sigmoid(x.re);
  return {s, s * (T(1) - s) * x.du};
}

}  // namespace ncedf
