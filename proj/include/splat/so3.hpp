#pragma once

#include "splat/common.hpp"

namespace splat {

// SO(3) exponential/logarithm and the right Jacobian family, with
// small-angle series switched in below `eps` to keep derivatives smooth.

template <class S> Mat3<S> so3_exp(const Vec3<S>& phi) {
  const S t2 = phi.squaredNorm();
  const Mat3<S> K = skew(phi);
  if (t2 < S(1e-16)) {
    return Mat3<S>::Identity() + K + S(0.5) * K * K;
  }
  const S t = std::sqrt(t2);
  return Mat3<S>::Identity() + (std::sin(t) / t) * K +
         ((S(1) - std::cos(t)) / t2) * K * K;
}

template <class S> Vec3<S> so3_log(const Mat3<S>& R) {
  const S tr = R.trace();
  const S c = std::clamp((tr - S(1)) / S(2), S(-1), S(1));
  const S t = std::acos(c);
  Vec3<S> w(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  if (t < S(1e-8)) return S(0.5) * w;
  if (t > pi<S>() - S(1e-6)) {
    // Near pi the antisymmetric part vanishes; recover the axis from R + I.
    const Mat3<S> A = (R + Mat3<S>::Identity()) / S(2);
    int k = 0;
    A.diagonal().maxCoeff(&k);
    Vec3<S> axis = A.col(k) / std::sqrt(A(k, k));
    axis.normalize();
    if (w.dot(axis) < S(0)) axis = -axis;
    return t * axis;
  }
  return (t / (S(2) * std::sin(t))) * w;
}

/// Right Jacobian: Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d).
template <class S> Mat3<S> so3_right_jacobian(const Vec3<S>& phi) {
  const S t2 = phi.squaredNorm();
  const Mat3<S> K = skew(phi);
  if (t2 < S(1e-16)) {
    return Mat3<S>::Identity() - S(0.5) * K + (S(1) / S(6)) * K * K;
  }
  const S t = std::sqrt(t2);
  return Mat3<S>::Identity() - ((S(1) - std::cos(t)) / t2) * K +
         ((t - std::sin(t)) / (t2 * t)) * K * K;
}

template <class S> Mat3<S> so3_right_jacobian_inv(const Vec3<S>& phi) {
  const S t2 = phi.squaredNorm();
  const Mat3<S> K = skew(phi);
  if (t2 < S(1e-16)) {
    return Mat3<S>::Identity() + S(0.5) * K + (S(1) / S(12)) * K * K;
  }
  const S t = std::sqrt(t2);
  const S coeff = S(1) / t2 - (S(1) + std::cos(t)) / (S(2) * t * std::sin(t));
  return Mat3<S>::Identity() + S(0.5) * K + coeff * K * K;
}

/// Left Jacobian inverse: Log(Exp(d) Exp(phi)) ~= phi + Jl_inv(phi) d.
template <class S> Mat3<S> so3_left_jacobian_inv(const Vec3<S>& phi) {
  return so3_right_jacobian_inv<S>(Vec3<S>(-phi));
}

/// Rigid transform p -> R p + t.
template <class S> struct SE3 {
  Mat3<S> R = Mat3<S>::Identity();
  Vec3<S> t = Vec3<S>::Zero();

  Vec3<S> apply(const Vec3<S>& p) const { return R * p + t; }
  SE3 inverse() const { return {R.transpose(), -(R.transpose() * t)}; }
  SE3 compose(const SE3& other) const {  // this ∘ other
    return {R * other.R, R * other.t + t};
  }
  template <class T> SE3<T> cast() const {
    return {R.template cast<T>(), t.template cast<T>()};
  }
};

}  // namespace splat
