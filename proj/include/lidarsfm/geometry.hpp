#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <optional>
#include <vector>

namespace lidarsfm {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Mat26 = Eigen::Matrix<double, 2, 6>;
using Mat34 = Eigen::Matrix<double, 3, 4>;
using Mat36 = Eigen::Matrix<double, 3, 6>;

// Minimal SE(3) element. Rotation kept as an orthonormal matrix; quaternions
// only appear at I/O boundaries.
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform Identity() { return {}; }
  static RigidTransform FromQuaternion(const Eigen::Quaterniond& q, const Vec3& t);

  Eigen::Quaterniond quaternion() const { return Eigen::Quaterniond(rotation); }

  RigidTransform inverse() const {
    return {rotation.transpose(), -(rotation.transpose() * translation)};
  }

  Vec3 operator*(const Vec3& x) const { return rotation * x + translation; }

  RigidTransform operator*(const RigidTransform& rhs) const {
    return {rotation * rhs.rotation, rotation * rhs.translation + translation};
  }

  Mat4 matrix() const;

  // RtR = I and det R = 1 within tol.
  bool is_valid(double tol = 1e-9) const;
};

// se(3) tangent element, rotational part first.
struct Twist {
  Vec3 rot = Vec3::Zero();    // radians
  Vec3 trans = Vec3::Zero();  // meters

  Vec6 vector() const {
    Vec6 v;
    v << rot, trans;
    return v;
  }
  static Twist FromVector(const Vec6& v) { return {v.head<3>(), v.tail<3>()}; }
  double norm() const { return vector().norm(); }
};

Mat3 skew(const Vec3& v);

// SO(3) exponential/logarithm. so3_log throws SingularityError for rotation
// angles at or beyond pi - 1e-6.
Mat3 so3_exp(const Vec3& omega);
Vec3 so3_log(const Mat3& rotation);

// Left Jacobian of SO(3) (equals the V matrix of the SE(3) exponential) and
// its inverse, with Taylor fallbacks below angle 1e-6.
Mat3 so3_left_jacobian(const Vec3& omega);
Mat3 so3_left_jacobian_inverse(const Vec3& omega);

RigidTransform se3_exp(const Twist& xi);
Twist se3_log(const RigidTransform& transform);

// Adjoint of T mapping twists: T exp(xi) T^-1 = exp(Adj(T) xi).
Mat6 se3_adjoint(const RigidTransform& transform);

// Inverse left/right Jacobians of the SE(3) exponential at xi, in the
// (rot, trans) block ordering. Used for exact derivatives of residuals of
// the form log(E exp(delta)).
Mat6 se3_left_jacobian_inverse(const Twist& xi);
Mat6 se3_right_jacobian_inverse(const Twist& xi);

// Pinhole camera: upper-triangular intrinsics plus the rigid mount of the
// camera inside its station. The station pose is the pose of the left
// camera, so the left mount is identity.
struct CameraModel {
  Mat3 intrinsics = Mat3::Identity();              // pixels
  RigidTransform cam_from_station;                 // identity for the left camera
  int width = 0;                                   // image bounds, pixels
  int height = 0;

  // P = K [R | t] of the camera-from-station map.
  Mat34 projection_matrix() const;

  bool is_valid() const;
};

// Projects a world point through a station pose (world-from-station) and a
// camera model. Throws CheiralityError for non-positive depth.
Vec2 project(const Vec3& x_world, const RigidTransform& world_from_station,
             const CameraModel& cam);

// Depth of a world point in the camera frame (z component).
double camera_depth(const Vec3& x_world, const RigidTransform& world_from_station,
                    const CameraModel& cam);

// d(pixel)/d(point in camera frame) of the pinhole map, at x_cam.
Mat23 pinhole_jacobian(const Mat3& intrinsics, const Vec3& x_cam);

// One ray for multi-view DLT triangulation.
struct ViewRay {
  Vec2 pixel;
  RigidTransform world_from_station;
  const CameraModel* cam = nullptr;
};

// Homogeneous linear least-squares triangulation, after normalizing pixels
// by the intrinsics. Throws DegenerateError for parallel or otherwise
// rank-deficient ray configurations.
Vec3 triangulate_dlt(const std::vector<ViewRay>& views);

// Least-squares rigid alignment (no scale) mapping src points onto dst via
// SVD of the cross-covariance. Returns nullopt when the point sets are
// rank-deficient (collinear or coincident).
std::optional<RigidTransform> rigid_align(const std::vector<Vec3>& src,
                                          const std::vector<Vec3>& dst);

}  // namespace lidarsfm
