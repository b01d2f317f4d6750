#pragma once

// Shared generators and small helpers for the test binaries.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "fusrecon/compounding.hpp"
#include "fusrecon/geometry.hpp"
#include "fusrecon/scan.hpp"

namespace fus::testing {

class Gen {
public:
    explicit Gen(std::uint64_t seed) : rng_(seed) {}

    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
    int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
    double normal(double sigma = 1.0) { return std::normal_distribution<double>(0.0, sigma)(rng_); }
    Vec3 vec(double lo, double hi) { return {uniform(lo, hi), uniform(lo, hi), uniform(lo, hi)}; }

    /// Angles kept away from the ry = +-pi/2 singularity.
    RigidParams params(double trans = 50.0, double angle = 1.2) {
        return {uniform(-trans, trans), uniform(-trans, trans), uniform(-trans, trans),
                uniform(-angle, angle), uniform(-angle, angle), uniform(-angle, angle)};
    }
    RigidMatrix rigid(double trans = 50.0, double angle = 1.2) { return params_to_matrix(params(trans, angle)); }

    std::mt19937_64& engine() { return rng_; }

private:
    std::mt19937_64 rng_;
};

/// A small random scan: random calibration, a random walk of poses and
/// uniform random intensities.
inline ScanSequence random_scan(Gen& g, int frames, int width, int height) {
    ScanSequence s;
    s.dims = {width, height};
    s.calib = Calibration::from_rigid(g.rigid(5.0, 0.3), g.uniform(0.3, 1.0), g.uniform(0.3, 1.0));
    RigidMatrix pose = g.rigid(100.0, 0.5);
    for (int m = 0; m < frames; ++m) {
        s.poses.push_back(pose);
        pose = pose * g.rigid(1.5, 0.05);
    }
    s.pixels.resize(static_cast<std::size_t>(frames) * s.dims.pixel_count());
    for (auto& v : s.pixels) v = static_cast<float>(g.uniform(0.0, 1.0));
    s.seed = static_cast<std::uint64_t>(g.integer(0, 1 << 30));
    return s;
}

inline double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

}  // namespace fus::testing
