#pragma once

// Synthetic tracked sweeps with exact ground truth.
//
// The phantom lives in reference-frame coordinates (the tool frame of the
// first image). Tissue motion displaces the point being imaged: a pixel at
// position p in frame t shows the phantom at p + u(p, t).

#include <cstdint>
#include <vector>

#include "fusrecon/compounding.hpp"
#include "fusrecon/deformation.hpp"
#include "fusrecon/scan.hpp"

namespace fus {

struct Ellipsoid {
    Vec3 center = Vec3::Zero();
    Vec3 semi_axes = Vec3::Ones();
    double intensity = 1.0;
};

struct PhantomSpec {
    std::vector<Ellipsoid> ellipsoids;
    double background_level = 0.0;
    Vec3 background_gradient = Vec3::Zero();  // intensity per mm
    double edge_width_mm = 0.0;               // 0 = hard ellipsoid boundaries
    double speckle = 0.0;                     // multiplicative uniform noise half-width

    void validate() const;
};

enum class TrajectoryShape : std::uint8_t { straight, c_shape, s_shape };
enum class ProbeOrientation : std::uint8_t { perpendicular, parallel };

TrajectoryShape parse_trajectory_shape(const std::string& s);
ProbeOrientation parse_probe_orientation(const std::string& s);
std::string to_string(TrajectoryShape s);
std::string to_string(ProbeOrientation o);

struct TrajectorySpec {
    TrajectoryShape shape = TrajectoryShape::straight;
    double length_mm = 250.0;
    int frames = 100;
    ProbeOrientation orientation = ProbeOrientation::perpendicular;
    double curvature = 1.0 / 250.0;   // c-shape, 1/mm
    double s_heading_rad = 0.3;       // s-shape peak heading deviation
    double s_period_mm = 125.0;       // s-shape heading period

    void validate() const;
};

enum class MotionTemporal : std::uint8_t { static_field, drift };

struct MotionSpec {
    double amplitude_mm = 0.0;
    double smoothness_mm = 30.0;      // control-point spacing of the random field
    MotionTemporal temporal = MotionTemporal::static_field;
    std::uint64_t seed = 0;
};

/// Smooth random displacement field: control vectors of norm `amplitude`
/// and random direction, trilinearly interpolated, clamped outside the region.
/// In drift mode the field ramps linearly from 0 at the first frame to full
/// strength at the last.
class MotionField {
public:
    MotionField() = default;
    MotionField(const MotionSpec& spec, const GridGeometry& region, std::size_t frames);

    bool active() const { return active_; }
    Vec3 displacement(const Vec3& p, std::size_t t) const;

private:
    MotionSpec spec_;
    DisplacementField field_;
    std::size_t frames_ = 1;
    bool active_ = false;
};

/// The point p imaging phantom location `c` in frame t, i.e. p + u(p, t) = c,
/// by fixed-point iteration.
Vec3 imaged_position(const MotionField& motion, const Vec3& c, std::size_t t, int iterations = 100);

double sample_phantom(const PhantomSpec& spec, const Vec3& p, std::size_t t, const MotionField& motion);

/// Reference-frame <- tool poses; pose 0 is exactly the identity.
std::vector<RigidMatrix> generate_trajectory(const TrajectorySpec& spec);

/// Renders one frame. Speckle (if any) is drawn from a generator seeded with
/// (noise_seed, t).
std::vector<float> render_frame(const PhantomSpec& phantom, const RigidMatrix& pose, const Calibration& calib,
                                FrameDims dims, std::size_t t, const MotionField& motion,
                                std::uint64_t noise_seed = 0);

/// Calibration placing the image top-centre at the tool origin.
Calibration default_calibration(FrameDims dims, double pixel_spacing_mm);

/// A handful of soft ellipsoids placed on frames spread along the trajectory.
PhantomSpec default_phantom(const std::vector<RigidMatrix>& trajectory, const Calibration& calib, FrameDims dims,
                            std::uint64_t seed);

struct SimulationConfig {
    PhantomSpec phantom;                 // empty ellipsoid list => default_phantom
    TrajectorySpec trajectory;
    MotionSpec motion;
    FrameDims dims{160, 120};
    double pixel_spacing_mm = 0.5;
    RigidMatrix placement = RigidMatrix::Identity();  // world <- reference frame
    double fps = 20.0;
    std::uint64_t seed = 0;

    static RigidMatrix default_placement();
};

struct SimulatedScan {
    ScanSequence scan;
    TransformSet gt;
    PhantomSpec phantom;
    MotionField motion;
    PointSet landmarks;  // ellipsoid centres, reference-frame mm
};

SimulatedScan simulate_scan(const SimulationConfig& config);

/// Adds N(0, sigma) noise to the six parameters of every frame but the first.
std::vector<RigidParams> perturb_params(const std::vector<RigidParams>& params, double trans_sigma_mm,
                                        double rot_sigma_rad, std::uint64_t seed);
TransformSet perturb_poses(const TransformSet& ts, double trans_sigma_mm, double rot_sigma_rad, std::uint64_t seed);

}  // namespace fus
