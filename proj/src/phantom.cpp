#include "fusrecon/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "fusrecon/error.hpp"

namespace fus {

void PhantomSpec::validate() const {
    for (const auto& e : ellipsoids) {
        if (!(e.semi_axes.minCoeff() > 0)) throw InvalidArgument("ellipsoid semi-axes must be positive");
        if (!(e.intensity >= 0 && e.intensity <= 1)) throw InvalidArgument("ellipsoid intensity must be in [0, 1]");
        if (!e.center.allFinite()) throw InvalidArgument("ellipsoid centre must be finite");
    }
    if (!(edge_width_mm >= 0)) throw InvalidArgument("edge width must be non-negative");
    if (!(speckle >= 0 && speckle <= 1)) throw InvalidArgument("speckle level must be in [0, 1]");
}

TrajectoryShape parse_trajectory_shape(const std::string& s) {
    if (s == "straight") return TrajectoryShape::straight;
    if (s == "c_shape") return TrajectoryShape::c_shape;
    if (s == "s_shape") return TrajectoryShape::s_shape;
    throw InvalidArgument("unknown trajectory shape '" + s + "' (expected straight|c_shape|s_shape)");
}

ProbeOrientation parse_probe_orientation(const std::string& s) {
    if (s == "perpendicular") return ProbeOrientation::perpendicular;
    if (s == "parallel") return ProbeOrientation::parallel;
    throw InvalidArgument("unknown probe orientation '" + s + "' (expected perpendicular|parallel)");
}

std::string to_string(TrajectoryShape s) {
    switch (s) {
        case TrajectoryShape::straight: return "straight";
        case TrajectoryShape::c_shape: return "c_shape";
        case TrajectoryShape::s_shape: return "s_shape";
    }
    return "?";
}

std::string to_string(ProbeOrientation o) { return o == ProbeOrientation::perpendicular ? "perpendicular" : "parallel"; }

void TrajectorySpec::validate() const {
    if (frames < 2) throw InvalidArgument("trajectory needs at least 2 frames");
    if (!(length_mm > 0)) throw InvalidArgument("trajectory length must be positive");
    if (shape == TrajectoryShape::c_shape && !(curvature > 0))
        throw InvalidArgument("c-shape curvature must be positive");
    if (shape == TrajectoryShape::s_shape && !(s_period_mm > 0))
        throw InvalidArgument("s-shape period must be positive");
}

MotionField::MotionField(const MotionSpec& spec, const GridGeometry& region, std::size_t frames)
    : spec_(spec), field_(region), frames_(std::max<std::size_t>(frames, 1)) {
    if (!(spec.amplitude_mm >= 0)) throw InvalidArgument("motion amplitude must be non-negative");
    active_ = spec.amplitude_mm > 0;
    if (!active_) return;
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (auto& v : field_.vectors) {
        Vec3 d(n01(rng), n01(rng), n01(rng));
        v = spec.amplitude_mm * d.normalized();
    }
}

Vec3 MotionField::displacement(const Vec3& p, std::size_t t) const {
    if (!active_) return Vec3::Zero();
    Vec3 u = field_.at(field_.geometry.world_to_index(p));
    if (spec_.temporal == MotionTemporal::drift)
        u *= frames_ > 1 ? static_cast<double>(t) / static_cast<double>(frames_ - 1) : 1.0;
    return u;
}

Vec3 imaged_position(const MotionField& motion, const Vec3& c, std::size_t t, int iterations) {
    Vec3 p = c;
    for (int it = 0; it < iterations && motion.active(); ++it) {
        const Vec3 next = c - motion.displacement(p, t);
        const bool done = (next - p).norm() < 1e-12;
        p = next;
        if (done) break;
    }
    return p;
}

namespace {

double smoothstep(double x) {
    x = std::clamp(x, 0.0, 1.0);
    return x * x * (3.0 - 2.0 * x);
}

// Fraction of `p` inside the ellipsoid, ramping across a band of
// `edge` mm around the surface.
double coverage(const Ellipsoid& e, const Vec3& p, double edge) {
    const double rho = ((p - e.center).array() / e.semi_axes.array()).matrix().norm();
    if (edge <= 0) return rho <= 1.0 ? 1.0 : 0.0;
    const double signed_dist = (rho - 1.0) * e.semi_axes.minCoeff();
    return smoothstep(0.5 - signed_dist / edge);
}

}  // namespace

double sample_phantom(const PhantomSpec& spec, const Vec3& p, std::size_t t, const MotionField& motion) {
    const Vec3 q = p + motion.displacement(p, t);
    double value = spec.background_level + spec.background_gradient.dot(q);
    for (const auto& e : spec.ellipsoids) {
        const double f = coverage(e, q, spec.edge_width_mm);
        if (f > 0) value += f * (e.intensity - value);
    }
    return std::clamp(value, 0.0, 1.0);
}

std::vector<RigidMatrix> generate_trajectory(const TrajectorySpec& spec) {
    spec.validate();
    const auto frames = static_cast<std::size_t>(spec.frames);
    const double step = spec.length_mm / static_cast<double>(frames - 1);
    const bool perp = spec.orientation == ProbeOrientation::perpendicular;
    // Heading rotates about the tool y (depth) axis; at heading 0 the probe
    // moves along +z (perpendicular) or +x (parallel).
    const Vec3 e_scan = perp ? Vec3::UnitZ() : Vec3::UnitX();
    auto pose = [](double heading, const Vec3& pos) {
        RigidMatrix m = RigidMatrix::Identity();
        m.topLeftCorner<3, 3>() = Eigen::AngleAxisd(heading, Vec3::UnitY()).toRotationMatrix();
        m.topRightCorner<3, 1>() = pos;
        return m;
    };

    std::vector<RigidMatrix> out;
    out.reserve(frames);
    switch (spec.shape) {
        case TrajectoryShape::straight:
            for (std::size_t m = 0; m < frames; ++m) {
                RigidMatrix p = RigidMatrix::Identity();
                p.topRightCorner<3, 1>() = e_scan * (static_cast<double>(m) * spec.length_mm / static_cast<double>(frames - 1));
                out.push_back(p);
            }
            break;
        case TrajectoryShape::c_shape: {
            const double k = spec.curvature;
            for (std::size_t m = 0; m < frames; ++m) {
                const double s = static_cast<double>(m) * step;
                const double heading = k * s;
                const Vec3 along = e_scan * (std::sin(heading) / k);
                const Vec3 lateral = Eigen::AngleAxisd(std::numbers::pi / 2, Vec3::UnitY()) * e_scan;
                out.push_back(pose(heading, along + lateral * ((1.0 - std::cos(heading)) / k)));
            }
            break;
        }
        case TrajectoryShape::s_shape: {
            // Centre line has a sinusoidal lateral offset a*sin(2*pi*z/P) about
            // the sweep axis, with peak heading deviation s_heading_rad. Frames
            // sit at equal arc length; poses are re-expressed relative to frame 0.
            const double w = 2 * std::numbers::pi / spec.s_period_mm;
            const double amp = std::tan(spec.s_heading_rad) / w;
            const Vec3 lateral = Eigen::AngleAxisd(std::numbers::pi / 2, Vec3::UnitY()) * e_scan;
            auto speed = [&](double z) { return std::hypot(1.0, amp * w * std::cos(w * z)); };
            auto place = [&](double z) {
                return pose(std::atan(amp * w * std::cos(w * z)), e_scan * z + lateral * (amp * std::sin(w * z)));
            };
            // Arc length is at least z, so integrating ds/dz until it reaches
            // each target s gives z(s). Simpson steps, linear inverse per step.
            constexpr int kSub = 64;
            const double h = step / kSub;
            double z = 0, arc = 0;
            for (std::size_t m = 0; m < frames; ++m) {
                const double target = static_cast<double>(m) * step;
                while (true) {
                    const double seg = h / 6.0 * (speed(z) + 4 * speed(z + h / 2) + speed(z + h));
                    if (arc + seg >= target) {
                        const double zm = z + h * (target - arc) / seg;
                        out.push_back(place(zm));
                        break;
                    }
                    arc += seg;
                    z += h;
                }
            }
            const RigidMatrix base = rigid_inverse(out.front());
            for (auto& p : out) p = base * p;
            break;
        }
    }
    out.front() = RigidMatrix::Identity();
    return out;
}

std::vector<float> render_frame(const PhantomSpec& phantom, const RigidMatrix& pose, const Calibration& calib,
                                FrameDims dims, std::size_t t, const MotionField& motion, std::uint64_t noise_seed) {
    const PointSet world = frame_pixels_to_world(dims, calib, pose, 1);
    std::vector<float> out(world.size());
    for (std::size_t i = 0; i < world.size(); ++i)
        out[i] = static_cast<float>(sample_phantom(phantom, world[i], t, motion));
    if (phantom.speckle > 0) {
        std::seed_seq seq{static_cast<std::uint32_t>(noise_seed), static_cast<std::uint32_t>(noise_seed >> 32),
                          static_cast<std::uint32_t>(t)};
        std::mt19937_64 rng(seq);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        for (auto& v : out) v = static_cast<float>(std::clamp(v * (1.0 + phantom.speckle * u(rng)), 0.0, 1.0));
    }
    return out;
}

Calibration default_calibration(FrameDims dims, double pixel_spacing_mm) {
    RigidMatrix rigid = RigidMatrix::Identity();
    rigid(0, 3) = -0.5 * (dims.width - 1) * pixel_spacing_mm;
    return Calibration::from_rigid(rigid, pixel_spacing_mm, pixel_spacing_mm);
}

PhantomSpec default_phantom(const std::vector<RigidMatrix>& trajectory, const Calibration& calib, FrameDims dims,
                            std::uint64_t seed) {
    PhantomSpec spec;
    spec.background_level = 0.15;
    spec.background_gradient = Vec3(0.0, 0.003, 0.0);
    spec.edge_width_mm = 3.0;

    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double frame_w = (dims.width - 1) * calib.spacing_u;
    const double frame_h = (dims.height - 1) * calib.spacing_v;
    const double size = std::min(frame_w, frame_h);

    constexpr int kBlobs = 10;
    for (int b = 0; b < kBlobs; ++b) {
        const auto m = static_cast<std::size_t>((b + 0.5) / kBlobs * static_cast<double>(trajectory.size() - 1));
        const Vec3 pix(dims.width * (0.2 + 0.6 * unit(rng)), dims.height * (0.2 + 0.6 * unit(rng)), 0.0);
        Ellipsoid e;
        e.center = transform_point(trajectory[m], transform_point(calib.image_to_tool, pix));
        e.semi_axes = Vec3(size * (0.08 + 0.1 * unit(rng)), size * (0.06 + 0.08 * unit(rng)),
                           size * (0.1 + 0.25 * unit(rng)));
        e.intensity = 0.45 + 0.5 * unit(rng);
        spec.ellipsoids.push_back(e);
    }
    return spec;
}

RigidMatrix SimulationConfig::default_placement() {
    return params_to_matrix({150.0, -40.0, 320.0, 0.3, -0.2, 0.5});
}

SimulatedScan simulate_scan(const SimulationConfig& cfg) {
    cfg.trajectory.validate();
    if (cfg.dims.width < 2 || cfg.dims.height < 2) throw InvalidArgument("frame dims must be at least 2x2");
    if (!(cfg.pixel_spacing_mm > 0)) throw InvalidArgument("pixel spacing must be positive");
    if (!is_rigid(cfg.placement)) throw InvalidArgument("placement must be a rigid matrix");

    SimulatedScan out;
    const auto traj = generate_trajectory(cfg.trajectory);
    ScanSequence& scan = out.scan;
    scan.dims = cfg.dims;
    scan.calib = default_calibration(cfg.dims, cfg.pixel_spacing_mm);
    scan.fps = cfg.fps;
    scan.seed = cfg.seed;
    for (const auto& t : traj) scan.poses.push_back(cfg.placement * t);
    out.gt = scan.ground_truth();

    out.phantom = cfg.phantom.ellipsoids.empty() ? default_phantom(traj, scan.calib, cfg.dims, cfg.seed) : cfg.phantom;
    if (cfg.phantom.ellipsoids.empty()) out.phantom.speckle = cfg.phantom.speckle;
    out.phantom.validate();

    if (cfg.motion.amplitude_mm > 0) {
        const double h = cfg.motion.smoothness_mm;
        if (!(h > 0)) throw InvalidArgument("motion smoothness must be positive");
        const GridGeometry region = scan_bounds(scan, out.gt, h, h);
        out.motion = MotionField(cfg.motion, region, traj.size());
    }

    scan.pixels.reserve(traj.size() * cfg.dims.pixel_count());
    for (std::size_t m = 0; m < traj.size(); ++m) {
        const auto frame = render_frame(out.phantom, out.gt[m], scan.calib, cfg.dims, m, out.motion, cfg.seed);
        scan.pixels.insert(scan.pixels.end(), frame.begin(), frame.end());
    }
    for (const auto& e : out.phantom.ellipsoids) out.landmarks.push_back(e.center);
    scan.landmarks = out.landmarks;
    return out;
}

std::vector<RigidParams> perturb_params(const std::vector<RigidParams>& params, double trans_sigma_mm,
                                        double rot_sigma_rad, std::uint64_t seed) {
    if (!(trans_sigma_mm >= 0) || !(rot_sigma_rad >= 0)) throw InvalidArgument("perturbation sigmas must be >= 0");
    std::vector<RigidParams> out = params;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (std::size_t m = 1; m < out.size(); ++m)
        for (int k = 0; k < 6; ++k) out[m][k] += (k < 3 ? trans_sigma_mm : rot_sigma_rad) * n01(rng);
    return out;
}

TransformSet perturb_poses(const TransformSet& ts, double trans_sigma_mm, double rot_sigma_rad, std::uint64_t seed) {
    if (trans_sigma_mm == 0 && rot_sigma_rad == 0) return ts;
    TransformSet out = TransformSet::from_params(perturb_params(ts.to_params(), trans_sigma_mm, rot_sigma_rad, seed));
    out.transforms.front() = ts.transforms.front();
    out.source = TransformSet::Source::predicted;
    return out;
}

}  // namespace fus
