#include "lidarsfm/geometry.hpp"

#include <Eigen/SVD>
#include <cmath>

#include "lidarsfm/errors.hpp"

namespace lidarsfm {

namespace {
constexpr double kSmallAngle = 1e-6;
constexpr double kLogSingularMargin = 1e-6;
}  // namespace

RigidTransform RigidTransform::FromQuaternion(const Eigen::Quaterniond& q, const Vec3& t) {
  return {q.normalized().toRotationMatrix(), t};
}

Mat4 RigidTransform::matrix() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

bool RigidTransform::is_valid(double tol) const {
  const Mat3 err = rotation.transpose() * rotation - Mat3::Identity();
  return err.cwiseAbs().maxCoeff() <= tol && std::abs(rotation.determinant() - 1.0) <= tol &&
         translation.allFinite();
}

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

Mat3 so3_exp(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const Mat3 w = skew(omega);
  if (theta2 < kSmallAngle * kSmallAngle) {
    // Second-order Taylor; exact enough below the small-angle cutoff.
    return Mat3::Identity() + w + 0.5 * w * w;
  }
  const double theta = std::sqrt(theta2);
  return Mat3::Identity() + (std::sin(theta) / theta) * w +
         ((1.0 - std::cos(theta)) / theta2) * w * w;
}

Vec3 so3_log(const Mat3& rotation) {
  const double cos_theta =
      std::clamp(0.5 * (rotation.trace() - 1.0), -1.0, 1.0);
  const double theta = std::acos(cos_theta);
  if (theta >= M_PI - kLogSingularMargin) {
    throw SingularityError("so3_log: rotation angle too close to pi");
  }
  const Vec3 axis_raw(rotation(2, 1) - rotation(1, 2), rotation(0, 2) - rotation(2, 0),
                      rotation(1, 0) - rotation(0, 1));
  if (theta < kSmallAngle) {
    return 0.5 * (1.0 + theta * theta / 6.0) * axis_raw;
  }
  return (theta / (2.0 * std::sin(theta))) * axis_raw;
}

Mat3 so3_left_jacobian(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const Mat3 w = skew(omega);
  if (theta2 < kSmallAngle * kSmallAngle) {
    return Mat3::Identity() + 0.5 * w + (1.0 / 6.0) * w * w;
  }
  const double theta = std::sqrt(theta2);
  return Mat3::Identity() + ((1.0 - std::cos(theta)) / theta2) * w +
         ((theta - std::sin(theta)) / (theta2 * theta)) * w * w;
}

Mat3 so3_left_jacobian_inverse(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const Mat3 w = skew(omega);
  if (theta2 < kSmallAngle * kSmallAngle) {
    return Mat3::Identity() - 0.5 * w + (1.0 / 12.0) * w * w;
  }
  const double theta = std::sqrt(theta2);
  const double coeff =
      (1.0 - 0.5 * theta * std::sin(theta) / (1.0 - std::cos(theta))) / theta2;
  return Mat3::Identity() - 0.5 * w + coeff * w * w;
}

RigidTransform se3_exp(const Twist& xi) {
  return {so3_exp(xi.rot), so3_left_jacobian(xi.rot) * xi.trans};
}

Twist se3_log(const RigidTransform& transform) {
  Twist xi;
  xi.rot = so3_log(transform.rotation);
  xi.trans = so3_left_jacobian_inverse(xi.rot) * transform.translation;
  return xi;
}

Mat6 se3_adjoint(const RigidTransform& transform) {
  Mat6 adj = Mat6::Zero();
  adj.topLeftCorner<3, 3>() = transform.rotation;
  adj.bottomRightCorner<3, 3>() = transform.rotation;
  adj.bottomLeftCorner<3, 3>() = skew(transform.translation) * transform.rotation;
  return adj;
}

namespace {

// Coupling block of the SE(3) left Jacobian (Barfoot's Q matrix, adapted to
// the rot-first twist ordering).
Mat3 se3_jacobian_q(const Vec3& omega, const Vec3& v) {
  const Mat3 w = skew(omega);
  const Mat3 p = skew(v);
  const double theta2 = omega.squaredNorm();
  double c1, c2, c3;  // series coefficients
  if (theta2 < 1e-8) {
    c1 = 1.0 / 6.0 - theta2 / 120.0;
    c2 = -1.0 / 24.0 + theta2 / 720.0;
    c3 = -1.0 / 120.0;
  } else {
    const double theta = std::sqrt(theta2);
    const double st = std::sin(theta);
    const double ct = std::cos(theta);
    c1 = (theta - st) / (theta2 * theta);
    c2 = (1.0 - 0.5 * theta2 - ct) / (theta2 * theta2);
    c3 = 0.5 * (c2 - 3.0 * (theta - st - theta2 * theta / 6.0) / (theta2 * theta2 * theta));
  }
  return 0.5 * p + c1 * (w * p + p * w + w * p * w) -
         c2 * (w * w * p + p * w * w - 3.0 * w * p * w) - c3 * (w * p * w * w + w * w * p * w);
}

}  // namespace

Mat6 se3_left_jacobian_inverse(const Twist& xi) {
  const Mat3 jl_inv = so3_left_jacobian_inverse(xi.rot);
  const Mat3 q = se3_jacobian_q(xi.rot, xi.trans);
  Mat6 out = Mat6::Zero();
  out.topLeftCorner<3, 3>() = jl_inv;
  out.bottomRightCorner<3, 3>() = jl_inv;
  out.bottomLeftCorner<3, 3>() = -jl_inv * q * jl_inv;
  return out;
}

Mat6 se3_right_jacobian_inverse(const Twist& xi) {
  return se3_left_jacobian_inverse({-xi.rot, -xi.trans});
}

Mat34 CameraModel::projection_matrix() const {
  Mat34 rt;
  rt.leftCols<3>() = cam_from_station.rotation;
  rt.rightCols<1>() = cam_from_station.translation;
  return intrinsics * rt;
}

bool CameraModel::is_valid() const {
  return intrinsics(0, 0) > 0.0 && intrinsics(1, 1) > 0.0 && intrinsics(1, 0) == 0.0 &&
         intrinsics(2, 0) == 0.0 && intrinsics(2, 1) == 0.0 && intrinsics(2, 2) == 1.0 &&
         cam_from_station.is_valid();
}

Vec2 project(const Vec3& x_world, const RigidTransform& world_from_station,
             const CameraModel& cam) {
  const Vec3 x_cam = cam.cam_from_station * (world_from_station.inverse() * x_world);
  if (x_cam.z() <= 0.0) {
    throw CheiralityError("project: point has non-positive depth");
  }
  const Vec3 h = cam.intrinsics * (x_cam / x_cam.z());
  return h.head<2>();
}

double camera_depth(const Vec3& x_world, const RigidTransform& world_from_station,
                    const CameraModel& cam) {
  return (cam.cam_from_station * (world_from_station.inverse() * x_world)).z();
}

Mat23 pinhole_jacobian(const Mat3& intrinsics, const Vec3& x_cam) {
  const double inv_z = 1.0 / x_cam.z();
  Mat23 d_norm;  // d(x/z, y/z)/d(x, y, z)
  d_norm << inv_z, 0.0, -x_cam.x() * inv_z * inv_z, 0.0, inv_z, -x_cam.y() * inv_z * inv_z;
  return intrinsics.topLeftCorner<2, 2>() * d_norm.topRows<2>();
}

Vec3 triangulate_dlt(const std::vector<ViewRay>& views) {
  if (views.size() < 2) {
    throw DegenerateError("triangulate_dlt: need at least two views");
  }
  // Normalized-coordinate DLT: rows x_hat x (R | t) X = 0 per view.
  Eigen::MatrixXd a(2 * views.size(), 4);
  for (size_t i = 0; i < views.size(); ++i) {
    const CameraModel& cam = *views[i].cam;
    const RigidTransform cam_from_world =
        cam.cam_from_station * views[i].world_from_station.inverse();
    Mat34 p;
    p.leftCols<3>() = cam_from_world.rotation;
    p.rightCols<1>() = cam_from_world.translation;
    const Vec3 xh = cam.intrinsics.inverse() * Vec3(views[i].pixel.x(), views[i].pixel.y(), 1.0);
    a.row(2 * i + 0) = xh.x() * p.row(2) - xh.z() * p.row(0);
    a.row(2 * i + 1) = xh.y() * p.row(2) - xh.z() * p.row(1);
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // Rank < 3 means the nullspace is not one-dimensional: no unique point.
  if (sv(2) <= 1e-8 * sv(0)) {
    throw DegenerateError("triangulate_dlt: degenerate ray configuration");
  }
  const Vec4 x = svd.matrixV().col(3);
  if (std::abs(x(3)) <= 1e-12 * x.head<3>().norm()) {
    throw DegenerateError("triangulate_dlt: point at infinity (parallel rays)");
  }
  return x.head<3>() / x(3);
}

std::optional<RigidTransform> rigid_align(const std::vector<Vec3>& src,
                                          const std::vector<Vec3>& dst) {
  if (src.size() != dst.size() || src.size() < 3) {
    return std::nullopt;
  }
  const double n = static_cast<double>(src.size());
  Vec3 src_mean = Vec3::Zero(), dst_mean = Vec3::Zero();
  for (size_t i = 0; i < src.size(); ++i) {
    src_mean += src[i];
    dst_mean += dst[i];
  }
  src_mean /= n;
  dst_mean /= n;

  Mat3 cov = Mat3::Zero();
  double spread = 0.0;
  for (size_t i = 0; i < src.size(); ++i) {
    cov += (dst[i] - dst_mean) * (src[i] - src_mean).transpose();
    spread += (src[i] - src_mean).squaredNorm();
  }
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  // Collinear or coincident sets leave the rotation under-determined.
  if (sv(1) <= 1e-9 * std::max(sv(0), spread / n)) {
    return std::nullopt;
  }
  Mat3 d = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) {
    d(2, 2) = -1.0;
  }
  RigidTransform out;
  out.rotation = svd.matrixU() * d * svd.matrixV().transpose();
  out.translation = dst_mean - out.rotation * src_mean;
  return out;
}

}  // namespace lidarsfm
