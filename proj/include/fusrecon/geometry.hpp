#pragma once

// Rigid-transform plumbing for tracked 2D ultrasound frames.
//
// Conventions used throughout the library:
//   - A 6-dof parameter vector is (tx, ty, tz, rx, ry, rz), translation in mm,
//     angles in radians, rotation R = Rz(rz) * Ry(ry) * Rx(rx) (intrinsic Z-Y-X).
//   - Homogeneous 4x4 matrices act on column vectors: p' = R p + t.
//   - Pixel (u, v) has its centre at image-plane position (u * su, v * sv, 0)
//     before calibration; u runs along columns, v along rows.

#include <array>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace fus {

using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Vec3 = Eigen::Vector3d;

/// 4x4 homogeneous rigid transform. Bottom row (0,0,0,1), orthonormal
/// rotation block with det +1.
using RigidMatrix = Mat4;

using PointSet = std::vector<Vec3>;

struct RigidParams {
    double tx = 0, ty = 0, tz = 0;
    double rx = 0, ry = 0, rz = 0;

    std::array<double, 6> to_array() const { return {tx, ty, tz, rx, ry, rz}; }
    static RigidParams from_array(const std::array<double, 6>& a) {
        return {a[0], a[1], a[2], a[3], a[4], a[5]};
    }
    double& operator[](int i);
    double operator[](int i) const;

    bool finite() const;
    friend bool operator==(const RigidParams&, const RigidParams&) = default;
};

struct FrameDims {
    int width = 0;   // columns (u)
    int height = 0;  // rows (v)

    std::size_t pixel_count() const {
        return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    }
    friend bool operator==(const FrameDims&, const FrameDims&) = default;
};

/// Image-to-tool mapping. `image_to_tool` already contains the pixel
/// spacing scale, so a pixel index (u, v, 0, 1) maps to tool coordinates
/// with a single multiply.
struct Calibration {
    Mat4 image_to_tool = Mat4::Identity();
    double spacing_u = 1.0;  // mm / pixel along columns
    double spacing_v = 1.0;  // mm / pixel along rows

    /// rigid * diag(su, sv, 1, 1)
    static Calibration from_rigid(const RigidMatrix& rigid, double su, double sv);

    /// Throws InvalidArgument if spacings are not positive or the affine
    /// block is singular.
    void validate() const;
};

Mat3 rotation_zyx(double rx, double ry, double rz);

/// dR/drx, dR/dry, dR/drz for the Z-Y-X convention.
std::array<Mat3, 3> rotation_zyx_partials(double rx, double ry, double rz);

RigidMatrix params_to_matrix(const RigidParams& p);

/// Inverse of params_to_matrix. Throws DegenerateRotation when |ry| is within
/// 1e-6 of pi/2 and InvalidArgument when `m` is not a rigid matrix.
RigidParams matrix_to_params(const RigidMatrix& m);

bool is_rigid(const Mat4& m, double tol = 1e-9);

/// Closed-form inverse of a rigid matrix (R^T, -R^T t).
RigidMatrix rigid_inverse(const RigidMatrix& m);

/// T^{ref<-m} = (T^{world<-ref})^{-1} * T^{world<-m}
RigidMatrix relative_transform(const RigidMatrix& pose_ref, const RigidMatrix& pose_m);

inline Vec3 transform_point(const Mat4& m, const Vec3& p) {
    return m.topLeftCorner<3, 3>() * p + m.topRightCorner<3, 1>();
}

PointSet transform_points(const PointSet& pts, const Mat4& m);

/// Pixel indices (u, v, 0) for every `stride`-th pixel along both axes,
/// row-major (v outer, u inner).
PointSet pixel_grid(FrameDims dims, int stride);

/// The four corner pixels in row-major order: (0,0), (W-1,0), (0,H-1), (W-1,H-1).
PointSet corner_pixels(FrameDims dims);

/// pixel -> tool (calibration) -> reference frame (t_frame).
PointSet frame_pixels_to_world(FrameDims dims, const Calibration& calib,
                               const RigidMatrix& t_frame, int stride);

PointSet corner_landmarks(FrameDims dims, const Calibration& calib, const RigidMatrix& t_frame);

}  // namespace fus
