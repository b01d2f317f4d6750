#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fusrecon/geometry.hpp"

namespace fus {

/// Per-frame rigid transforms into the reference (first) frame,
/// T^{ref<-m} for m = 0..M-1.
struct TransformSet {
    enum class Source : std::uint8_t { ground_truth, predicted };

    std::vector<RigidMatrix> transforms;
    Source source = Source::predicted;

    std::size_t size() const { return transforms.size(); }
    const RigidMatrix& operator[](std::size_t i) const { return transforms[i]; }
    RigidMatrix& operator[](std::size_t i) { return transforms[i]; }

    /// Relative transforms of tracked world<-tool poses with respect to the
    /// first pose. Entry 0 is exactly the identity.
    static TransformSet from_poses(const std::vector<RigidMatrix>& world_poses);
    static TransformSet from_params(const std::vector<RigidParams>& params,
                                    Source source = Source::predicted);
    std::vector<RigidParams> to_params() const;

    /// Length >= 2 and every entry rigid. With `require_identity_reference`
    /// the first entry must also be exactly the identity.
    void validate(bool require_identity_reference = true) const;
};

/// A tracked sweep: M frames of normalised intensities plus tracker poses.
struct ScanSequence {
    FrameDims dims;
    Calibration calib;
    std::vector<float> pixels;         // M * width * height, frame-major, row-major within a frame
    std::vector<RigidMatrix> poses;    // world <- tool, one per frame
    double fps = 20.0;
    std::uint64_t seed = 0;
    PointSet landmarks;                // optional, reference-frame mm

    std::size_t frame_count() const { return poses.size(); }
    std::span<const float> frame(std::size_t m) const {
        return {pixels.data() + m * dims.pixel_count(), dims.pixel_count()};
    }
    std::span<float> frame(std::size_t m) {
        return {pixels.data() + m * dims.pixel_count(), dims.pixel_count()};
    }

    TransformSet ground_truth() const { return TransformSet::from_poses(poses); }

    /// Throws InvalidArgument when counts and payload sizes disagree.
    void validate() const;
};

}  // namespace fus
