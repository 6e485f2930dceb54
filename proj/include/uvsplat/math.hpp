#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace uvsplat {

template <typename T> using Vec2 = Eigen::Matrix<T, 2, 1>;
template <typename T> using Vec3 = Eigen::Matrix<T, 3, 1>;
template <typename T> using Vec4 = Eigen::Matrix<T, 4, 1>;
template <typename T> using Mat2 = Eigen::Matrix<T, 2, 2>;
template <typename T> using Mat3 = Eigen::Matrix<T, 3, 3>;
template <typename T> using Mat32 = Eigen::Matrix<T, 3, 2>;
template <typename T> using Mat23 = Eigen::Matrix<T, 2, 3>;

/// Base error type for everything thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input data failed validation (bad file, violated invariant, shape mismatch).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Optimization produced a non-finite or runaway value.
class NumericalError : public Error {
 public:
  using Error::Error;
};

template <typename T> inline T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <typename T> inline T logit(T p) { return std::log(p / (T(1) - p)); }

template <typename T> inline T softplus(T x) {
  return x > T(20) ? x : std::log1p(std::exp(x));
}

template <typename T> inline T softplus_inverse(T y) {
  return y > T(20) ? y : std::log(std::expm1(y));
}

// d softplus / dx
template <typename T> inline T softplus_grad(T x) { return sigmoid(x); }

template <typename T> inline T clamp01(T x) { return std::min(std::max(x, T(0)), T(1)); }

// Gradient pass-through for clamp: boundaries count as inside.
template <typename T> inline T clamp01_grad(T x) { return (x >= T(0) && x <= T(1)) ? T(1) : T(0); }

template <typename T> inline T srgb_encode(T linear) {
  return linear <= T(0.0031308) ? T(12.92) * linear
                                : T(1.055) * std::pow(linear, T(1) / T(2.4)) - T(0.055);
}

template <typename T> inline T srgb_encode_grad(T linear) {
  return linear <= T(0.0031308) ? T(12.92)
                                : T(1.055) / T(2.4) * std::pow(linear, T(1) / T(2.4) - T(1));
}

template <typename T> inline T srgb_decode(T encoded) {
  return encoded <= T(0.04045) ? encoded / T(12.92)
                               : std::pow((encoded + T(0.055)) / T(1.055), T(2.4));
}

/// Rotation matrix of a (not necessarily unit) quaternion stored (w, x, y, z).
/// The quaternion is normalized internally.
template <typename T> Mat3<T> quat_to_matrix(const Vec4<T>& q_raw) {
  const Vec4<T> q = q_raw / q_raw.norm();
  const T w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3<T> r;
  r << T(1) - T(2) * (y * y + z * z), T(2) * (x * y - w * z), T(2) * (x * z + w * y),
      T(2) * (x * y + w * z), T(1) - T(2) * (x * x + z * z), T(2) * (y * z - w * x),
      T(2) * (x * z - w * y), T(2) * (y * z + w * x), T(1) - T(2) * (x * x + y * y);
  return r;
}

/// Adjoint of quat_to_matrix: maps dL/dR to dL/dq_raw (including the normalization).
template <typename T> Vec4<T> quat_to_matrix_backward(const Vec4<T>& q_raw, const Mat3<T>& g) {
  const T len = q_raw.norm();
  const Vec4<T> q = q_raw / len;
  const T w = q[0], x = q[1], y = q[2], z = q[3];
  Vec4<T> gq;
  gq[0] = T(2) * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
  gq[1] = T(2) * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - T(2) * x * g(1, 1) - w * g(1, 2) +
                  z * g(2, 0) + w * g(2, 1) - T(2) * x * g(2, 2));
  gq[2] = T(2) * (-T(2) * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) -
                  w * g(2, 0) + z * g(2, 1) - T(2) * y * g(2, 2));
  gq[3] = T(2) * (-T(2) * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) -
                  T(2) * z * g(1, 1) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1));
  // Project through q = q_raw / |q_raw|.
  return (gq - q * q.dot(gq)) / len;
}

template <typename T> Vec4<T> quat_identity() { return Vec4<T>(T(1), T(0), T(0), T(0)); }

template <typename T> Vec4<T> quat_from_axis_angle(const Vec3<T>& axis, T angle) {
  const Vec3<T> a = axis.normalized() * std::sin(angle / T(2));
  return Vec4<T>(std::cos(angle / T(2)), a[0], a[1], a[2]);
}

/// Adjoint of v / |v|.
template <typename T, int N>
Eigen::Matrix<T, N, 1> normalize_backward(const Eigen::Matrix<T, N, 1>& v,
                                          const Eigen::Matrix<T, N, 1>& g) {
  const T len = v.norm();
  const Eigen::Matrix<T, N, 1> u = v / len;
  return (g - u * u.dot(g)) / len;
}

/// Solid angle of the cube-face patch [0,x]x[0,y] on the unit-distance face plane.
template <typename T> T cube_area_element(T x, T y) {
  return std::atan2(x * y, std::sqrt(x * x + y * y + T(1)));
}

inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 1469598103934665603ULL) {
  return fnv1a(s.data(), s.size(), h);
}

}  // namespace uvsplat
