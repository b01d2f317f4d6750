#include "fusrecon/geometry.hpp"

#include <cmath>
#include <numbers>

#include <Eigen/LU>

#include "fusrecon/error.hpp"

namespace fus {

namespace {

constexpr double kGimbalTol = 1e-6;

void require_finite(const Mat4& m, const char* what) {
    if (!m.allFinite()) throw InvalidArgument(std::string(what) + ": non-finite matrix entry");
}

}  // namespace

double& RigidParams::operator[](int i) {
    switch (i) {
        case 0: return tx;
        case 1: return ty;
        case 2: return tz;
        case 3: return rx;
        case 4: return ry;
        case 5: return rz;
    }
    throw InvalidArgument("RigidParams index out of range");
}

double RigidParams::operator[](int i) const { return const_cast<RigidParams&>(*this)[i]; }

bool RigidParams::finite() const {
    for (double v : to_array())
        if (!std::isfinite(v)) return false;
    return true;
}

Calibration Calibration::from_rigid(const RigidMatrix& rigid, double su, double sv) {
    Calibration c;
    Mat4 scale = Mat4::Identity();
    scale(0, 0) = su;
    scale(1, 1) = sv;
    c.image_to_tool = rigid * scale;
    c.spacing_u = su;
    c.spacing_v = sv;
    c.validate();
    return c;
}

void Calibration::validate() const {
    if (!(spacing_u > 0) || !(spacing_v > 0) || !std::isfinite(spacing_u) || !std::isfinite(spacing_v))
        throw InvalidArgument("calibration pixel spacing must be positive and finite");
    require_finite(image_to_tool, "calibration");
    if (std::abs(image_to_tool.topLeftCorner<3, 3>().determinant()) < 1e-12)
        throw InvalidArgument("calibration affine block is singular");
}

Mat3 rotation_zyx(double rx, double ry, double rz) {
    return (Eigen::AngleAxisd(rz, Vec3::UnitZ()) * Eigen::AngleAxisd(ry, Vec3::UnitY()) *
            Eigen::AngleAxisd(rx, Vec3::UnitX()))
        .toRotationMatrix();
}

std::array<Mat3, 3> rotation_zyx_partials(double rx, double ry, double rz) {
    const Mat3 Rx = Eigen::AngleAxisd(rx, Vec3::UnitX()).toRotationMatrix();
    const Mat3 Ry = Eigen::AngleAxisd(ry, Vec3::UnitY()).toRotationMatrix();
    const Mat3 Rz = Eigen::AngleAxisd(rz, Vec3::UnitZ()).toRotationMatrix();

    // d/dθ of an axis rotation is [axis]_x * R(θ).
    auto hat = [](const Vec3& a) {
        Mat3 h;
        h << 0, -a.z(), a.y(), a.z(), 0, -a.x(), -a.y(), a.x(), 0;
        return h;
    };
    return {Rz * Ry * (hat(Vec3::UnitX()) * Rx), Rz * (hat(Vec3::UnitY()) * Ry) * Rx,
            (hat(Vec3::UnitZ()) * Rz) * Ry * Rx};
}

RigidMatrix params_to_matrix(const RigidParams& p) {
    if (!p.finite()) throw InvalidArgument("params_to_matrix: non-finite parameter");
    RigidMatrix m = RigidMatrix::Identity();
    m.topLeftCorner<3, 3>() = rotation_zyx(p.rx, p.ry, p.rz);
    m.topRightCorner<3, 1>() = Vec3(p.tx, p.ty, p.tz);
    return m;
}

bool is_rigid(const Mat4& m, double tol) {
    if (!m.allFinite()) return false;
    if (m(3, 0) != 0.0 || m(3, 1) != 0.0 || m(3, 2) != 0.0 || m(3, 3) != 1.0) return false;
    const Mat3 r = m.topLeftCorner<3, 3>();
    if (((r.transpose() * r) - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) return false;
    return std::abs(r.determinant() - 1.0) <= tol;
}

RigidParams matrix_to_params(const RigidMatrix& m) {
    if (!is_rigid(m)) throw InvalidArgument("matrix_to_params: input is not a rigid matrix");
    const Mat3 r = m.topLeftCorner<3, 3>();
    RigidParams p;
    p.ry = std::atan2(-r(2, 0), std::hypot(r(2, 1), r(2, 2)));
    if (std::numbers::pi / 2 - std::abs(p.ry) < kGimbalTol)
        throw DegenerateRotation("matrix_to_params: rotation at gimbal lock (ry = ±pi/2)");
    p.rx = std::atan2(r(2, 1), r(2, 2));
    p.rz = std::atan2(r(1, 0), r(0, 0));
    p.tx = m(0, 3);
    p.ty = m(1, 3);
    p.tz = m(2, 3);
    return p;
}

RigidMatrix rigid_inverse(const RigidMatrix& m) {
    RigidMatrix inv = RigidMatrix::Identity();
    const Mat3 rt = m.topLeftCorner<3, 3>().transpose();
    inv.topLeftCorner<3, 3>() = rt;
    inv.topRightCorner<3, 1>() = -(rt * m.topRightCorner<3, 1>());
    return inv;
}

RigidMatrix relative_transform(const RigidMatrix& pose_ref, const RigidMatrix& pose_m) {
    if (!is_rigid(pose_ref) || !is_rigid(pose_m))
        throw InvalidArgument("relative_transform: inputs must be rigid matrices");
    if (pose_ref == pose_m) return RigidMatrix::Identity();
    return rigid_inverse(pose_ref) * pose_m;
}

PointSet transform_points(const PointSet& pts, const Mat4& m) {
    PointSet out;
    out.reserve(pts.size());
    for (const auto& p : pts) out.push_back(transform_point(m, p));
    return out;
}

PointSet pixel_grid(FrameDims dims, int stride) {
    if (stride < 1) throw InvalidArgument("pixel stride must be >= 1");
    if (dims.width < 1 || dims.height < 1) throw InvalidArgument("frame dims must be positive");
    PointSet out;
    out.reserve(static_cast<std::size_t>((dims.width + stride - 1) / stride) *
                static_cast<std::size_t>((dims.height + stride - 1) / stride));
    for (int v = 0; v < dims.height; v += stride)
        for (int u = 0; u < dims.width; u += stride) out.emplace_back(u, v, 0.0);
    return out;
}

PointSet corner_pixels(FrameDims dims) {
    if (dims.width < 1 || dims.height < 1) throw InvalidArgument("frame dims must be positive");
    const double w = dims.width - 1, h = dims.height - 1;
    return {Vec3(0, 0, 0), Vec3(w, 0, 0), Vec3(0, h, 0), Vec3(w, h, 0)};
}

PointSet frame_pixels_to_world(FrameDims dims, const Calibration& calib,
                               const RigidMatrix& t_frame, int stride) {
    return transform_points(transform_points(pixel_grid(dims, stride), calib.image_to_tool), t_frame);
}

PointSet corner_landmarks(FrameDims dims, const Calibration& calib, const RigidMatrix& t_frame) {
    return transform_points(transform_points(corner_pixels(dims), calib.image_to_tool), t_frame);
}

}  // namespace fus
