#include "fusrecon/scan.hpp"

#include <cmath>

#include "fusrecon/error.hpp"

namespace fus {

TransformSet TransformSet::from_poses(const std::vector<RigidMatrix>& world_poses) {
    TransformSet ts;
    ts.source = Source::ground_truth;
    ts.transforms.reserve(world_poses.size());
    for (const auto& pose : world_poses) {
        ts.transforms.push_back(world_poses.empty() ? pose : relative_transform(world_poses.front(), pose));
    }
    return ts;
}

TransformSet TransformSet::from_params(const std::vector<RigidParams>& params, Source source) {
    TransformSet ts;
    ts.source = source;
    ts.transforms.reserve(params.size());
    for (const auto& p : params) ts.transforms.push_back(params_to_matrix(p));
    return ts;
}

std::vector<RigidParams> TransformSet::to_params() const {
    std::vector<RigidParams> out;
    out.reserve(transforms.size());
    for (const auto& t : transforms) out.push_back(matrix_to_params(t));
    return out;
}

void TransformSet::validate(bool require_identity_reference) const {
    if (transforms.size() < 2) throw InvalidArgument("transform set needs at least 2 frames");
    for (std::size_t m = 0; m < transforms.size(); ++m)
        if (!is_rigid(transforms[m], 1e-6))
            throw InvalidArgument("transform " + std::to_string(m) + " is not rigid");
    if (require_identity_reference && transforms.front() != RigidMatrix::Identity())
        throw InvalidArgument("first transform must be the identity (reference frame)");
}

void ScanSequence::validate() const {
    if (dims.width < 1 || dims.height < 1) throw InvalidArgument("scan frame dims must be positive");
    if (poses.size() < 2) throw InvalidArgument("scan needs at least 2 frames");
    if (pixels.size() != poses.size() * dims.pixel_count())
        throw InvalidArgument("scan pixel payload does not match M * width * height");
    calib.validate();
    for (std::size_t m = 0; m < poses.size(); ++m)
        if (!is_rigid(poses[m], 1e-6))
            throw InvalidArgument("pose " + std::to_string(m) + " is not rigid");
    for (float v : pixels)
        if (!std::isfinite(v)) throw InvalidArgument("scan contains non-finite intensities");
}

}  // namespace fus
