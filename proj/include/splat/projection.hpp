#pragma once

#include "splat/scene.hpp"

namespace splat {

template <class S> struct RasterSettings {
  S dilation = S(0.3);            // EWA s; pixels^2 for camera, radians^2 for lidar
  S alpha_clamp = S(0.999);
  S alpha_min = S(1) / S(255);
  S qform_max = S(9);             // 3-sigma support bound, matches the AABB
  S transmittance_min = S(1e-4);  // early-exit threshold; <= 0 disables
  S near_plane = S(0.05);         // camera cull, meters
  S lidar_min_range = S(0.25);    // spherical Jacobian singularity guard
};

template <class S> struct Aabb2 {
  Vec2<S> lo, hi;
  bool intersects(const Vec2<S>& rect_lo, const Vec2<S>& rect_hi) const {
    return lo.x() < rect_hi.x() && hi.x() > rect_lo.x() && lo.y() < rect_hi.y() &&
           hi.y() > rect_lo.y();
  }
};

/// A Gaussian projected into camera pixel space or lidar spherical space.
/// For lidar, mean2d = (azimuth, elevation), depth_key = range, and
/// velocity = (v_phi, v_omega, v_r); cameras leave velocity.z() unused.
template <class S> struct ProjectedGaussian {
  Eigen::Index source_index = 0;
  Vec2<S> mean2d = Vec2<S>::Zero();
  S depth_key = S(0);
  Mat2<S> cov2d = Mat2<S>::Zero();
  Vec3<S> velocity = Vec3<S>::Zero();
  Aabb2<S> aabb{Vec2<S>::Zero(), Vec2<S>::Zero()};
  // Saved forward state for alpha evaluation and the backward pass.
  Mat2<S> conic = Mat2<S>::Zero();  // (cov2d + s I)^-1
  S det_ratio = S(1);               // sqrt(|cov2d| / |cov2d + s I|)
  Vec3<S> mu_sensor = Vec3<S>::Zero();
  Vec3<S> rel_vel_sensor = Vec3<S>::Zero();  // argument of the J * (...) product
};

/// v = J (-omega x mu - v_sensor + v_dyn), the first-order screen/spherical
/// velocity of a Gaussian relative to the sensor.
template <class S>
Vec3<S> relative_velocity_sensor(const Vec3<S>& mu_sensor, const Vec3<S>& vel_lin,
                                 const Vec3<S>& vel_ang, const Vec3<S>& v_dyn_sensor) {
  return -vel_ang.cross(mu_sensor) - vel_lin + v_dyn_sensor;
}

template <class S>
Vec2<S> pixel_velocity(const Mat23<S>& J, const Vec3<S>& rel_vel_sensor) {
  return J * rel_vel_sensor;
}

template <class S>
Vec3<S> spherical_velocity(const Mat3<S>& J, const Vec3<S>& rel_vel_sensor) {
  return J * rel_vel_sensor;
}

/// Rectangular AABB: 3 sigma of the dilated footprint plus the distance the
/// mean travels during half the shutter, per axis.
template <class S>
Aabb2<S> velocity_expanded_aabb(const Vec2<S>& mean2d, const Mat2<S>& cov2d,
                                const Vec2<S>& vel2d, S dilation, S shutter_duration) {
  const Vec2<S> half(
      S(3) * std::sqrt(std::max(S(0), cov2d(0, 0) + dilation)) +
          std::abs(vel2d.x()) * shutter_duration / S(2),
      S(3) * std::sqrt(std::max(S(0), cov2d(1, 1) + dilation)) +
          std::abs(vel2d.y()) * shutter_duration / S(2));
  return {mean2d - half, mean2d + half};
}

namespace detail {

template <class S>
bool finalize_footprint(ProjectedGaussian<S>& g, S dilation) {
  const S det = g.cov2d.determinant();
  const Mat2<S> dilated = g.cov2d + dilation * Mat2<S>::Identity();
  const S det_dilated = dilated.determinant();
  if (!(det > S(0)) || !(det_dilated > S(0))) return false;
  g.conic = dilated.inverse();
  g.det_ratio = std::sqrt(det / det_dilated);
  return true;
}

}  // namespace detail

template <class S>
std::vector<ProjectedGaussian<S>> project_camera(const ComposedScene<S>& scene,
                                                 const CameraModel<S>& cam,
                                                 const RasterSettings<S>& settings) {
  std::vector<ProjectedGaussian<S>> out;
  out.reserve(scene.size());
  const Mat3<S>& R = cam.pose.R;
  const Vec2<S> rect_lo(S(0), S(0));
  const Vec2<S> rect_hi(S(cam.width), S(cam.height));
  for (Eigen::Index i = 0; i < scene.size(); ++i) {
    const Vec3<S> mu_c = cam.pose.apply(scene.mean_w.col(i));
    if (mu_c.z() <= settings.near_plane) continue;
    ProjectedGaussian<S> g;
    g.source_index = i;
    g.mu_sensor = mu_c;
    g.depth_key = mu_c.z();
    g.mean2d = cam.project(mu_c);
    const Mat23<S> J = cam.projection_jacobian(mu_c);
    const Mat3<S> cov_c = R * scene.cov_w[i] * R.transpose();
    g.cov2d = J * cov_c * J.transpose();
    if (!detail::finalize_footprint(g, settings.dilation)) continue;
    g.rel_vel_sensor = relative_velocity_sensor<S>(
        mu_c, cam.vel_lin, cam.vel_ang, Vec3<S>(R * scene.vel_dyn_w.col(i)));
    g.velocity.template head<2>() = pixel_velocity<S>(J, g.rel_vel_sensor);
    g.aabb = velocity_expanded_aabb<S>(g.mean2d, g.cov2d, g.velocity.template head<2>(),
                                       settings.dilation, cam.shutter_duration);
    if (!g.aabb.intersects(rect_lo, rect_hi)) continue;
    out.push_back(g);
  }
  return out;
}

/// Spherical map (Eq.-10 style): (azimuth, elevation, range) with azimuth
/// wrapped to [0, 2 pi).
template <class S> Vec3<S> spherical_of(const Vec3<S>& p) {
  const S r = p.norm();
  return {wrap_two_pi(std::atan2(p.y(), p.x())), std::asin(p.z() / r), r};
}

template <class S> Mat3<S> spherical_jacobian(const Vec3<S>& p) {
  const S x = p.x(), y = p.y(), z = p.z();
  const S d2 = x * x + y * y;
  const S d = std::sqrt(d2);
  const S r2 = d2 + z * z;
  const S r = std::sqrt(r2);
  Mat3<S> J;
  J << -y / d2, x / d2, S(0),
      -x * z / (r2 * d), -y * z / (r2 * d), d / r2,
      x / r, y / r, z / r;
  return J;
}

template <class S>
std::vector<ProjectedGaussian<S>> project_lidar(const ComposedScene<S>& scene,
                                                const LidarModel<S>& lidar,
                                                const RasterSettings<S>& settings) {
  std::vector<ProjectedGaussian<S>> out;
  out.reserve(scene.size());
  const Mat3<S>& R = lidar.pose.R;
  const S elev_min = lidar.elevation_channels.front();
  const S elev_max = lidar.elevation_channels.back();
  const S s = lidar.dilation();
  for (Eigen::Index i = 0; i < scene.size(); ++i) {
    const Vec3<S> mu_l = lidar.pose.apply(scene.mean_w.col(i));
    const S d2 = mu_l.x() * mu_l.x() + mu_l.y() * mu_l.y();
    if (d2 < settings.lidar_min_range * settings.lidar_min_range) continue;
    const Vec3<S> sph = spherical_of(mu_l);
    if (sph.z() < settings.lidar_min_range) continue;
    ProjectedGaussian<S> g;
    g.source_index = i;
    g.mu_sensor = mu_l;
    g.depth_key = sph.z();
    g.mean2d = sph.template head<2>();
    const Mat3<S> J = spherical_jacobian(mu_l);
    const Mat3<S> cov_l = R * scene.cov_w[i] * R.transpose();
    g.cov2d = (J * cov_l * J.transpose()).template topLeftCorner<2, 2>();
    if (!detail::finalize_footprint(g, s)) continue;
    g.rel_vel_sensor = relative_velocity_sensor<S>(
        mu_l, lidar.vel_lin, lidar.vel_ang, Vec3<S>(R * scene.vel_dyn_w.col(i)));
    g.velocity = spherical_velocity<S>(J, g.rel_vel_sensor);
    g.aabb = velocity_expanded_aabb<S>(g.mean2d, g.cov2d, g.velocity.template head<2>(),
                                       s, lidar.scan_duration);
    if (g.aabb.hi.y() < elev_min || g.aabb.lo.y() > elev_max) continue;
    out.push_back(g);
  }
  return out;
}

/// Gradients w.r.t. projected quantities, indexed by SOURCE Gaussian index
/// (each source appears at most once per sensor's projected list).
template <class S> struct ProjectedGrads {
  MatRX<S, 2> g_mean2d;   // (phi, omega) for lidar
  MatRX<S, 1> g_range;    // lidar only: d/d(range of mean)
  std::vector<Mat2<S>> g_cov2d;
  MatRX<S, 3> g_velocity;
  MatRX<S, 1> g_opacity;  // activated opacity
  MatRX<S, 3> g_color;
  MatX<S> g_feature;

  void resize(Eigen::Index n, int d_f) {
    g_mean2d.setZero(2, n);
    g_range.setZero(1, n);
    g_cov2d.assign(n, Mat2<S>::Zero());
    g_velocity.setZero(3, n);
    g_opacity.setZero(1, n);
    g_color.setZero(3, n);
    g_feature.setZero(d_f, n);
  }
  void add(const ProjectedGrads& o) {
    g_mean2d += o.g_mean2d;
    g_range += o.g_range;
    for (size_t i = 0; i < g_cov2d.size(); ++i) g_cov2d[i] += o.g_cov2d[i];
    g_velocity += o.g_velocity;
    g_opacity += o.g_opacity;
    g_color += o.g_color;
    g_feature += o.g_feature;
  }
};

template <class S> struct SensorGrads {
  Vec3<S> d_vel_lin = Vec3<S>::Zero();
  Vec3<S> d_vel_ang = Vec3<S>::Zero();
  S d_time_offset = S(0);
  VecX<S> d_embedding;

  void add(const SensorGrads& o) {
    d_vel_lin += o.d_vel_lin;
    d_vel_ang += o.d_vel_ang;
    d_time_offset += o.d_time_offset;
    if (o.d_embedding.size()) {
      if (!d_embedding.size()) d_embedding = VecX<S>::Zero(o.d_embedding.size());
      d_embedding += o.d_embedding;
    }
  }
};

namespace detail {

/// Shared part of the projection backward: everything downstream of the
/// sensor-frame mean/covariance/velocity. J is the projection Jacobian
/// (2x3 rows used for cameras, 3x3 for lidar via G3 masking).
template <class S>
struct SensorFrameGrads {
  Vec3<S> g_mu_sensor = Vec3<S>::Zero();
  Mat3<S> g_cov_sensor = Mat3<S>::Zero();
  Mat3<S> g_J = Mat3<S>::Zero();  // camera uses rows 0-1
  Vec3<S> g_u = Vec3<S>::Zero();
};

template <class S>
void velocity_chain_backward(const Vec3<S>& mu_sensor, const Vec3<S>& vel_ang,
                             const Mat3<S>& R_world_to_sensor, const Vec3<S>& g_u,
                             bool dynamic, Vec3<S>& g_mu_sensor, SensorGrads<S>& sg,
                             Vec3<S>* g_vel_dyn_w) {
  sg.d_vel_ang += -mu_sensor.cross(g_u);
  sg.d_vel_lin += -g_u;
  g_mu_sensor += vel_ang.cross(g_u);
  if (dynamic && g_vel_dyn_w) *g_vel_dyn_w += R_world_to_sensor.transpose() * g_u;
}

}  // namespace detail

template <class S>
void project_camera_backward(const ComposedScene<S>& scene, const CameraModel<S>& cam,
                             const std::vector<ProjectedGaussian<S>>& projected,
                             const ProjectedGrads<S>& gin, ComposeGrads<S>& gscene,
                             SensorGrads<S>& gsensor, Eigen::Index begin,
                             Eigen::Index end) {
  const Mat3<S>& R = cam.pose.R;
  for (Eigen::Index k = begin; k < end; ++k) {
    const auto& g = projected[k];
    const Eigen::Index i = g.source_index;
    const bool dynamic = scene.graph->gaussians.actor_id(i) != 0;
    const Vec3<S>& mu_c = g.mu_sensor;
    const Mat23<S> J = cam.projection_jacobian(mu_c);
    const Mat3<S> cov_c = R * scene.cov_w[i] * R.transpose();

    const Mat2<S> G2 = S(0.5) * (gin.g_cov2d[k] + gin.g_cov2d[k].transpose());
    Vec3<S> g_mu_c = J.transpose() * gin.g_mean2d.col(k);
    const Mat3<S> g_cov_c = J.transpose() * G2 * J;
    const Vec2<S> g_v2d = gin.g_velocity.col(k).template head<2>();
    Mat23<S> g_J = S(2) * G2 * J * cov_c + g_v2d * g.rel_vel_sensor.transpose();

    // J entries depend on mu_c.
    const S z = mu_c.z(), iz2 = S(1) / (z * z), iz3 = iz2 / z;
    g_mu_c.x() += -cam.fx * iz2 * g_J(0, 2);
    g_mu_c.y() += -cam.fy * iz2 * g_J(1, 2);
    g_mu_c.z() += -cam.fx * iz2 * g_J(0, 0) - cam.fy * iz2 * g_J(1, 1) +
                  S(2) * cam.fx * mu_c.x() * iz3 * g_J(0, 2) +
                  S(2) * cam.fy * mu_c.y() * iz3 * g_J(1, 2);

    const Vec3<S> g_u = J.transpose() * g_v2d;
    Vec3<S> g_vdyn = Vec3<S>::Zero();
    detail::velocity_chain_backward<S>(mu_c, cam.vel_ang, R, g_u, dynamic, g_mu_c,
                                       gsensor, &g_vdyn);
    if (dynamic) gscene.g_vel_dyn_w.col(i) += g_vdyn;

    gscene.g_mean_w.col(i) += R.transpose() * g_mu_c;
    gscene.g_cov_w[i] += R.transpose() * g_cov_c * R;
  }
}

namespace detail {

/// Contraction of a gradient w.r.t. the spherical Jacobian with its
/// derivative in the sensor-frame point.
template <class S>
Vec3<S> spherical_jacobian_point_grad(const Vec3<S>& p, const Mat3<S>& g_J) {
  const S x = p.x(), y = p.y(), z = p.z();
  const S D2 = x * x + y * y;
  const S D = std::sqrt(D2);
  const S D3 = D2 * D, D4 = D2 * D2;
  const S R2 = D2 + z * z;
  const S R1 = std::sqrt(R2);
  const S R3 = R2 * R1, R4 = R2 * R2;

  Mat3<S> dJx, dJy, dJz;
  dJx << S(2) * x * y / D4, (y * y - x * x) / D4, S(0),
      z * (-D2 * R2 + S(2) * D2 * x * x + R2 * x * x) / (D3 * R4),
      x * y * z * (S(3) * D2 + z * z) / (D3 * R4), x * (z * z - D2) / (D * R4),
      (y * y + z * z) / R3, -x * y / R3, -x * z / R3;
  dJy << (y * y - x * x) / D4, S(-2) * x * y / D4, S(0),
      x * y * z * (S(3) * D2 + z * z) / (D3 * R4),
      z * (-D2 * R2 + S(2) * D2 * y * y + R2 * y * y) / (D3 * R4),
      y * (z * z - D2) / (D * R4), -x * y / R3, (x * x + z * z) / R3, -y * z / R3;
  dJz << S(0), S(0), S(0), x * (z * z - D2) / (D * R4), y * (z * z - D2) / (D * R4),
      S(-2) * D * z / R4, -x * z / R3, -y * z / R3, D2 / R3;

  return {(g_J.array() * dJx.array()).sum(), (g_J.array() * dJy.array()).sum(),
          (g_J.array() * dJz.array()).sum()};
}

}  // namespace detail

template <class S>
void project_lidar_backward(const ComposedScene<S>& scene, const LidarModel<S>& lidar,
                            const std::vector<ProjectedGaussian<S>>& projected,
                            const ProjectedGrads<S>& gin, ComposeGrads<S>& gscene,
                            SensorGrads<S>& gsensor, Eigen::Index begin,
                            Eigen::Index end) {
  const Mat3<S>& R = lidar.pose.R;
  for (Eigen::Index k = begin; k < end; ++k) {
    const auto& g = projected[k];
    const Eigen::Index i = g.source_index;
    const bool dynamic = scene.graph->gaussians.actor_id(i) != 0;
    const Vec3<S>& mu_l = g.mu_sensor;
    const Mat3<S> J = spherical_jacobian(mu_l);
    const Mat3<S> cov_l = R * scene.cov_w[i] * R.transpose();

    Mat3<S> G3 = Mat3<S>::Zero();
    G3.template topLeftCorner<2, 2>() =
        S(0.5) * (gin.g_cov2d[k] + gin.g_cov2d[k].transpose());

    Vec3<S> g_sph(gin.g_mean2d(0, k), gin.g_mean2d(1, k), gin.g_range(0, k));
    Vec3<S> g_mu_l = J.transpose() * g_sph;
    const Mat3<S> g_cov_l = J.transpose() * G3 * J;
    const Vec3<S> g_v = gin.g_velocity.col(k);
    const Mat3<S> g_J = S(2) * G3 * J * cov_l + g_v * g.rel_vel_sensor.transpose();
    g_mu_l += detail::spherical_jacobian_point_grad<S>(mu_l, g_J);

    const Vec3<S> g_u = J.transpose() * g_v;
    Vec3<S> g_vdyn = Vec3<S>::Zero();
    detail::velocity_chain_backward<S>(mu_l, lidar.vel_ang, R, g_u, dynamic, g_mu_l,
                                       gsensor, &g_vdyn);
    if (dynamic) gscene.g_vel_dyn_w.col(i) += g_vdyn;

    gscene.g_mean_w.col(i) += R.transpose() * g_mu_l;
    gscene.g_cov_w[i] += R.transpose() * g_cov_l * R;
  }
}

}  // namespace splat
