#pragma once

#include "splat/common.hpp"
#include "splat/so3.hpp"

namespace splat {

/// Columnar store of all per-Gaussian learnable parameters. Storage is raw
/// (unconstrained); activations are applied on read: scale = exp(scale_log),
/// opacity = sigmoid(opacity_logit), quaternion normalized.
template <class S> struct GaussianSet {
  MatRX<S, 3> mean;           // world frame for actor_id 0, box frame otherwise
  MatRX<S, 3> scale_log;      // log-meters
  MatRX<S, 4> quat;           // (w, x, y, z), normalized on read
  MatRX<S, 1> opacity_logit;
  MatRX<S, 3> color;          // base color f^rgb
  MatX<S> feature;            // D_f x N
  Eigen::VectorXi actor_id;   // 0 = static background, k>0 = actor k

  Eigen::Index size() const { return mean.cols(); }
  int feature_dim() const { return static_cast<int>(feature.rows()); }

  void resize(Eigen::Index n, int d_f) {
    mean.setZero(3, n);
    scale_log.setZero(3, n);
    quat.setZero(4, n);
    quat.row(0).setOnes();
    opacity_logit.setZero(1, n);
    color.setZero(3, n);
    feature.setZero(d_f, n);
    actor_id.setZero(n);
  }

  template <class T> GaussianSet<T> cast() const {
    GaussianSet<T> g;
    g.mean = mean.template cast<T>();
    g.scale_log = scale_log.template cast<T>();
    g.quat = quat.template cast<T>();
    g.opacity_logit = opacity_logit.template cast<T>();
    g.color = color.template cast<T>();
    g.feature = feature.template cast<T>();
    g.actor_id = actor_id;
    return g;
  }
};

/// A rigid actor: bounding box, timestamped actor->world poses with
/// learnable per-timestamp corrections, and one body-frame velocity pair
/// with a learnable offset.
template <class S> struct ActorTrack {
  Vec3<S> box_size = Vec3<S>::Zero();
  std::vector<S> stamps;             // strictly increasing
  std::vector<SE3<S>> poses;         // actor -> world
  MatRX<S, 6> pose_offset;           // per stamp: rows 0-2 translation (world), 3-5 rotvec (actor frame)
  Vec3<S> vel_lin = Vec3<S>::Zero(); // body frame, from pose differences
  Vec3<S> vel_ang = Vec3<S>::Zero();
  Vec6<S> vel_offset = Vec6<S>::Zero();  // learnable: rows 0-2 linear, 3-5 angular

  Eigen::Index pose_count() const { return static_cast<Eigen::Index>(poses.size()); }

  Vec3<S> effective_vel_lin() const { return vel_lin + vel_offset.template head<3>(); }
  Vec3<S> effective_vel_ang() const { return vel_ang + vel_offset.template tail<3>(); }

  SE3<S> corrected_pose(Eigen::Index i) const {
    return {poses[i].R * so3_exp<S>(pose_offset.col(i).template tail<3>()),
            poses[i].t + pose_offset.col(i).template head<3>()};
  }

  /// Initialize body-frame velocities from consecutive pose differences.
  void init_velocity_from_poses() {
    vel_lin.setZero();
    vel_ang.setZero();
    const auto n = pose_count();
    if (n < 2) return;
    Vec3<S> v = Vec3<S>::Zero(), w = Vec3<S>::Zero();
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
      const S dt = stamps[i + 1] - stamps[i];
      v += poses[i].R.transpose() * (poses[i + 1].t - poses[i].t) / dt;
      w += so3_log<S>(Mat3<S>(poses[i].R.transpose() * poses[i + 1].R)) / dt;
    }
    vel_lin = v / S(n - 1);
    vel_ang = w / S(n - 1);
  }

  template <class T> ActorTrack<T> cast() const {
    ActorTrack<T> a;
    a.box_size = box_size.template cast<T>();
    a.stamps.assign(stamps.begin(), stamps.end());
    for (const auto& p : poses) a.poses.push_back(p.template cast<T>());
    a.pose_offset = pose_offset.template cast<T>();
    a.vel_lin = vel_lin.template cast<T>();
    a.vel_ang = vel_ang.template cast<T>();
    a.vel_offset = vel_offset.template cast<T>();
    return a;
  }
};

template <class S> struct CameraModel {
  S fx = S(100), fy = S(100), cx = S(50), cy = S(50);
  int width = 100, height = 100;
  SE3<S> pose;                        // world -> sensor
  Vec3<S> vel_lin = Vec3<S>::Zero();  // sensor frame, learnable
  Vec3<S> vel_ang = Vec3<S>::Zero();
  S shutter_duration = S(0);          // t_rs, seconds
  S time_offset = S(0);               // learnable offset to the exposure center
  VecX<S> embedding = VecX<S>::Zero(8);
  S timestamp = S(0);                 // scene time the pose refers to

  Vec2<S> project(const Vec3<S>& p_cam) const {
    return {fx * p_cam.x() / p_cam.z() + cx, fy * p_cam.y() / p_cam.z() + cy};
  }
  Mat23<S> projection_jacobian(const Vec3<S>& p) const {
    const S iz = S(1) / p.z();
    Mat23<S> J;
    J << fx * iz, S(0), -fx * p.x() * iz * iz, S(0), fy * iz, -fy * p.y() * iz * iz;
    return J;
  }
  /// Unit ray direction through pixel center (u+.5, v+.5), camera frame.
  Vec3<S> ray_direction(int u, int v) const {
    Vec3<S> d((S(u) + S(0.5) - cx) / fx, (S(v) + S(0.5) - cy) / fy, S(1));
    return d.normalized();
  }

  template <class T> CameraModel<T> cast() const {
    CameraModel<T> c;
    c.fx = T(fx); c.fy = T(fy); c.cx = T(cx); c.cy = T(cy);
    c.width = width; c.height = height;
    c.pose = pose.template cast<T>();
    c.vel_lin = vel_lin.template cast<T>();
    c.vel_ang = vel_ang.template cast<T>();
    c.shutter_duration = T(shutter_duration);
    c.time_offset = T(time_offset);
    c.embedding = embedding.template cast<T>();
    c.timestamp = T(timestamp);
    return c;
  }
};

template <class S> struct LidarModel {
  std::vector<S> elevation_channels;  // strictly increasing, radians
  S azimuth_resolution = S(0);        // res_phi, radians
  S scan_duration = S(0);             // t_rs, seconds
  S beam_divergence_h = S(0), beam_divergence_v = S(0);  // radians
  SE3<S> pose;                        // world -> sensor, at scan center time
  Vec3<S> vel_lin = Vec3<S>::Zero();  // sensor frame, learnable
  Vec3<S> vel_ang = Vec3<S>::Zero();
  S timestamp = S(0);                 // scan center time
  S max_range = S(120);

  int beam_count() const { return static_cast<int>(elevation_channels.size()); }
  /// EWA dilation: squared geometric mean of the beam divergences.
  S dilation() const { return beam_divergence_h * beam_divergence_v; }

  template <class T> LidarModel<T> cast() const {
    LidarModel<T> l;
    l.elevation_channels.assign(elevation_channels.begin(), elevation_channels.end());
    l.azimuth_resolution = T(azimuth_resolution);
    l.scan_duration = T(scan_duration);
    l.beam_divergence_h = T(beam_divergence_h);
    l.beam_divergence_v = T(beam_divergence_v);
    l.pose = pose.template cast<T>();
    l.vel_lin = vel_lin.template cast<T>();
    l.vel_ang = vel_ang.template cast<T>();
    l.timestamp = T(timestamp);
    l.max_range = T(max_range);
    return l;
  }
};

/// Static world + actor tracks. Actor k (1-based) lives at tracks[k-1].
template <class S> struct SceneGraph {
  GaussianSet<S> gaussians;
  std::vector<ActorTrack<S>> tracks;

  const ActorTrack<S>& track_for(int actor_id) const {
    if (actor_id <= 0 || actor_id > static_cast<int>(tracks.size()))
      throw std::out_of_range("unknown actor_id " + std::to_string(actor_id));
    return tracks[actor_id - 1];
  }

  template <class T> SceneGraph<T> cast() const {
    SceneGraph<T> g;
    g.gaussians = gaussians.template cast<T>();
    for (const auto& a : tracks) g.tracks.push_back(a.template cast<T>());
    return g;
  }
};

/// Sigma = R(q) diag(exp(scale_log))^2 R(q)^T.
template <class S>
Mat3<S> covariance_from_scale_quat(const Vec3<S>& scale_log, const Vec4<S>& quat) {
  const Vec4<S> q = quat.normalized();
  const Mat3<S> R = Eigen::Quaternion<S>(q(0), q(1), q(2), q(3)).toRotationMatrix();
  const Vec3<S> s2 = (S(2) * scale_log).array().exp();
  return R * s2.asDiagonal() * R.transpose();
}

/// Gradient of a symmetric matrix functional through
/// covariance_from_scale_quat, accumulated onto raw scale_log/quat grads.
template <class S>
void covariance_backward(const Vec3<S>& scale_log, const Vec4<S>& quat,
                         const Mat3<S>& g_sigma_in, Eigen::Ref<Vec3<S>> g_scale_log,
                         Eigen::Ref<Vec4<S>> g_quat) {
  const Mat3<S> G = S(0.5) * (g_sigma_in + g_sigma_in.transpose());
  const S qn = quat.norm();
  const Vec4<S> q = quat / qn;
  const Mat3<S> R = Eigen::Quaternion<S>(q(0), q(1), q(2), q(3)).toRotationMatrix();
  const Vec3<S> s2 = (S(2) * scale_log).array().exp();

  const Mat3<S> M = R.transpose() * G * R;
  for (int k = 0; k < 3; ++k) g_scale_log(k) += M(k, k) * S(2) * s2(k);

  const Mat3<S> g_R = S(2) * G * R * s2.asDiagonal();

  const S w = q(0), x = q(1), y = q(2), z = q(3);
  Mat3<S> dR[4];
  dR[0] << S(0), -z, y, z, S(0), -x, -y, x, S(0);
  dR[1] << S(0), y, z, y, S(-2) * x, -w, z, w, S(-2) * x;
  dR[2] << S(-2) * y, x, w, x, S(0), z, -w, z, S(-2) * y;
  dR[3] << S(-2) * z, -w, x, w, S(-2) * z, y, x, y, S(0);
  Vec4<S> g_qhat;
  for (int k = 0; k < 4; ++k) g_qhat(k) = S(2) * (g_R.array() * dR[k].array()).sum();

  // Through normalization q_hat = q / |q|.
  g_quat += (g_qhat - q * q.dot(g_qhat)) / qn;
}

/// Pose of an actor at time t: piecewise geodesic interpolation of the
/// offset-corrected pose sequence (linear translation, slerp rotation),
/// linearly extrapolated outside the stamped span.
template <class S> struct InterpolatedPose {
  SE3<S> pose;        // actor -> world at t
  Eigen::Index i0 = 0, i1 = 0;  // bracketing stamp indices
  S u = S(0);         // interpolation fraction (may lie outside [0,1])
  Vec3<S> geo = Vec3<S>::Zero();  // Log(A_i0^T A_i1)
};

template <class S>
InterpolatedPose<S> interpolate_pose(const ActorTrack<S>& track, S t) {
  InterpolatedPose<S> out;
  const auto n = track.pose_count();
  if (n == 0) throw std::runtime_error("actor track has no poses");
  if (n == 1) {
    out.pose = track.corrected_pose(0);
    return out;
  }
  Eigen::Index i = 0;
  while (i + 2 < n && t >= track.stamps[i + 1]) ++i;
  out.i0 = i;
  out.i1 = i + 1;
  const S t0 = track.stamps[i], t1 = track.stamps[i + 1];
  out.u = (t - t0) / (t1 - t0);
  const SE3<S> a = track.corrected_pose(i), b = track.corrected_pose(i + 1);
  out.geo = so3_log<S>(Mat3<S>(a.R.transpose() * b.R));
  out.pose.R = a.R * so3_exp<S>(Vec3<S>(out.u * out.geo));
  out.pose.t = (S(1) - out.u) * a.t + out.u * b.t;
  return out;
}

/// World-frame Gaussian set at a fixed query time. Immutable once built.
template <class S> struct ComposedScene {
  const SceneGraph<S>* graph = nullptr;
  S time = S(0);
  MatRX<S, 3> mean_w;
  std::vector<Mat3<S>> cov_w;
  MatRX<S, 3> vel_dyn_w;          // world-frame velocity contribution, zero for static
  MatRX<S, 1> opacity;            // activated
  std::vector<InterpolatedPose<S>> actor_poses;  // per track

  Eigen::Index size() const { return mean_w.cols(); }
};

template <class S>
ComposedScene<S> compose_at_time(const SceneGraph<S>& graph, S t) {
  ComposedScene<S> out;
  out.graph = &graph;
  out.time = t;
  const auto n = graph.gaussians.size();
  out.mean_w.resize(3, n);
  out.cov_w.resize(n);
  out.vel_dyn_w.setZero(3, n);
  out.opacity.resize(1, n);
  out.actor_poses.reserve(graph.tracks.size());
  for (const auto& track : graph.tracks)
    out.actor_poses.push_back(interpolate_pose(track, t));

  for (Eigen::Index i = 0; i < n; ++i) {
    const Mat3<S> cov_local = covariance_from_scale_quat<S>(
        graph.gaussians.scale_log.col(i), graph.gaussians.quat.col(i));
    const int aid = graph.gaussians.actor_id(i);
    out.opacity(0, i) = sigmoid(graph.gaussians.opacity_logit(0, i));
    if (aid == 0) {
      out.mean_w.col(i) = graph.gaussians.mean.col(i);
      out.cov_w[i] = cov_local;
      continue;
    }
    if (aid < 0 || aid > static_cast<int>(graph.tracks.size()))
      throw std::out_of_range("unknown actor_id " + std::to_string(aid));
    const auto& ip = out.actor_poses[aid - 1];
    const auto& track = graph.tracks[aid - 1];
    const Vec3<S> mu_b = graph.gaussians.mean.col(i);
    out.mean_w.col(i) = ip.pose.apply(mu_b);
    out.cov_w[i] = ip.pose.R * cov_local * ip.pose.R.transpose();
    out.vel_dyn_w.col(i) =
        ip.pose.R * (track.effective_vel_ang().cross(mu_b) + track.effective_vel_lin());
  }
  return out;
}

/// Gradients flowing back through compose_at_time. Per-Gaussian slots are
/// written disjointly; actor slots are accumulated and must be reduced in a
/// fixed order by the caller when parallelized.
template <class S> struct ComposeGrads {
  MatRX<S, 3> g_mean_w;           // input: d(loss)/d(world mean)
  std::vector<Mat3<S>> g_cov_w;   // input: d(loss)/d(world covariance)
  MatRX<S, 3> g_vel_dyn_w;        // input: d(loss)/d(world dynamic velocity)

  void resize(Eigen::Index n) {
    g_mean_w.setZero(3, n);
    g_cov_w.assign(n, Mat3<S>::Zero());
    g_vel_dyn_w.setZero(3, n);
  }
};

template <class S> struct SceneParamGrads {
  MatRX<S, 3> d_mean, d_scale_log, d_color;
  MatRX<S, 4> d_quat;
  MatRX<S, 1> d_opacity_logit;
  MatX<S> d_feature;
  struct ActorGrad {
    MatRX<S, 6> d_pose_offset;
    Vec6<S> d_vel_offset = Vec6<S>::Zero();
  };
  std::vector<ActorGrad> actors;

  void resize_like(const SceneGraph<S>& g) {
    const auto n = g.gaussians.size();
    d_mean.setZero(3, n);
    d_scale_log.setZero(3, n);
    d_color.setZero(3, n);
    d_quat.setZero(4, n);
    d_opacity_logit.setZero(1, n);
    d_feature.setZero(g.gaussians.feature.rows(), n);
    actors.resize(g.tracks.size());
    for (size_t a = 0; a < g.tracks.size(); ++a) {
      actors[a].d_pose_offset.setZero(6, g.tracks[a].pose_count());
      actors[a].d_vel_offset.setZero();
    }
  }

  void add(const SceneParamGrads& o) {
    d_mean += o.d_mean;
    d_scale_log += o.d_scale_log;
    d_color += o.d_color;
    d_quat += o.d_quat;
    d_opacity_logit += o.d_opacity_logit;
    d_feature += o.d_feature;
    for (size_t a = 0; a < actors.size(); ++a) {
      actors[a].d_pose_offset += o.actors[a].d_pose_offset;
      actors[a].d_vel_offset += o.actors[a].d_vel_offset;
    }
  }
};

namespace detail {

/// dL/dpsi for a right-perturbation R Exp(psi) given dL/d(R x) pulled back,
/// split into the three canonical generators.
template <class S>
Vec3<S> rotation_right_perturbation_grad(const Mat3<S>& R, const Mat3<S>& g_sigma,
                                         const Mat3<S>& sigma_local) {
  const Mat3<S> M = R.transpose() * S(0.5) * (g_sigma + g_sigma.transpose()) * R;
  Vec3<S> g;
  for (int k = 0; k < 3; ++k) {
    const Mat3<S> E = skew(Vec3<S>(Vec3<S>::Unit(k)));
    g(k) = (M.array() * (E * sigma_local + sigma_local * E.transpose()).array()).sum();
  }
  return g;
}

}  // namespace detail

/// Pull composed-scene gradients back onto raw scene parameters.
/// `g_opacity` is the gradient w.r.t. activated opacity (chained through the
/// sigmoid here); `ginputs` carries world-frame mean/cov/velocity grads.
template <class S>
void compose_backward(const ComposedScene<S>& scene, const ComposeGrads<S>& gin,
                      const MatRX<S, 1>& g_opacity, SceneParamGrads<S>& out,
                      Eigen::Index begin, Eigen::Index end) {
  const SceneGraph<S>& graph = *scene.graph;
  for (Eigen::Index i = begin; i < end; ++i) {
    const int aid = graph.gaussians.actor_id(i);
    const S o = scene.opacity(0, i);
    out.d_opacity_logit(0, i) += g_opacity(0, i) * o * (S(1) - o);

    Mat3<S> g_cov_local;
    if (aid == 0) {
      out.d_mean.col(i) += gin.g_mean_w.col(i);
      g_cov_local = gin.g_cov_w[i];
    } else {
      const auto& ip = scene.actor_poses[aid - 1];
      const auto& track = graph.tracks[aid - 1];
      auto& ag = out.actors[aid - 1];
      const Mat3<S>& R = ip.pose.R;
      const Vec3<S> mu_b = graph.gaussians.mean.col(i);
      const Mat3<S> cov_local = covariance_from_scale_quat<S>(
          graph.gaussians.scale_log.col(i), graph.gaussians.quat.col(i));
      const Vec3<S> w_ang = track.effective_vel_ang();
      const Vec3<S> w_body = w_ang.cross(mu_b) + track.effective_vel_lin();

      // Mean.
      const Vec3<S> g_mu_w = gin.g_mean_w.col(i);
      out.d_mean.col(i) += R.transpose() * g_mu_w;
      Vec3<S> g_psi = mu_b.cross(Vec3<S>(R.transpose() * g_mu_w));

      // Covariance.
      g_cov_local = R.transpose() * gin.g_cov_w[i] * R;
      g_psi += detail::rotation_right_perturbation_grad<S>(R, gin.g_cov_w[i], cov_local);

      // Dynamic velocity v_dyn_w = R (w_ang x mu_b + v).
      const Vec3<S> g_vw = gin.g_vel_dyn_w.col(i);
      const Vec3<S> g_w = R.transpose() * g_vw;
      g_psi += w_body.cross(g_w);
      ag.d_vel_offset.template head<3>() += g_w;
      ag.d_vel_offset.template tail<3>() += mu_b.cross(g_w);
      out.d_mean.col(i) += -w_ang.cross(g_w);

      // Translation offsets.
      if (track.pose_count() == 1) {
        ag.d_pose_offset.col(0).template head<3>() += g_mu_w;
        const Mat3<S> Jr0 = so3_right_jacobian<S>(
            Vec3<S>(track.pose_offset.col(0).template tail<3>()));
        ag.d_pose_offset.col(0).template tail<3>() += Jr0.transpose() * g_psi;
      } else {
        const S u = ip.u;
        ag.d_pose_offset.col(ip.i0).template head<3>() += (S(1) - u) * g_mu_w;
        ag.d_pose_offset.col(ip.i1).template head<3>() += u * g_mu_w;

        // Rotation offsets through R(t) = A0 Exp(u Log(A0^T A1)).
        const Vec3<S> phi = ip.geo;
        const Mat3<S> Jr_u = so3_right_jacobian<S>(Vec3<S>(u * phi));
        const Mat3<S> B0 = so3_exp<S>(Vec3<S>(u * phi)).transpose() -
                           u * Jr_u * so3_left_jacobian_inv<S>(phi);
        const Mat3<S> B1 = u * Jr_u * so3_right_jacobian_inv<S>(phi);
        const Mat3<S> Jr0 = so3_right_jacobian<S>(
            Vec3<S>(track.pose_offset.col(ip.i0).template tail<3>()));
        const Mat3<S> Jr1 = so3_right_jacobian<S>(
            Vec3<S>(track.pose_offset.col(ip.i1).template tail<3>()));
        ag.d_pose_offset.col(ip.i0).template tail<3>() +=
            Jr0.transpose() * B0.transpose() * g_psi;
        ag.d_pose_offset.col(ip.i1).template tail<3>() +=
            Jr1.transpose() * B1.transpose() * g_psi;
      }
    }
    covariance_backward<S>(graph.gaussians.scale_log.col(i), graph.gaussians.quat.col(i),
                           g_cov_local, out.d_scale_log.col(i), out.d_quat.col(i));
  }
}

}  // namespace splat
