#pragma once

// Dense displacement fields and the pieces of the registration loss:
// backward trilinear warping, bending energy, and masked MSE similarity.
// Displacements are in mm; a field shares origin/spacing with its volume.

#include <vector>

#include "fusrecon/compounding.hpp"

namespace fus {

struct DisplacementField {
    GridGeometry geometry;
    std::vector<Vec3> vectors;

    DisplacementField() = default;
    explicit DisplacementField(const GridGeometry& g) : geometry(g), vectors(g.dims.count(), Vec3::Zero()) {}

    const GridDims& dims() const { return geometry.dims; }
    /// Displacement at continuous index coordinates, trilinear, clamped to
    /// the grid.
    Vec3 at(const Vec3& index) const;
};

/// Coarse grid of displacement vectors; control point j sits on voxel j * stride.
struct ControlGrid {
    GridDims dims;
    int stride = 4;
    std::vector<Vec3> values;

    /// Smallest control grid whose last point reaches the last voxel on each axis.
    static ControlGrid covering(const GridDims& volume_dims, int stride);
};

struct TrilinearSample {
    double value = 0.0;
    bool in_bounds = false;
};

/// Trilinear interpolation at continuous index `p`. Masked-off neighbours are
/// excluded and the remaining weights renormalised; out of bounds when `p`
/// leaves [0, dims-1] or no masked-in neighbour carries weight.
TrilinearSample trilinear_sample(const VolumeGrid& vol, const Vec3& p);

/// As trilinear_sample, also returning d(value)/dp in index units.
TrilinearSample trilinear_sample(const VolumeGrid& vol, const Vec3& p, Vec3& grad);

/// Backward warp: out(n) = vol(n + ddf(n) / spacing).
VolumeGrid warp(const VolumeGrid& vol, const DisplacementField& ddf);

/// Solves q + ddf(q) = y for q (world mm) by fixed-point iteration: where a
/// feature at `y` in the moving volume lands after warp(). Converges when the
/// field's Jacobian norm is below 1.
Vec3 inverse_displace(const DisplacementField& ddf, const Vec3& y, int iterations = 100);

DisplacementField upsample_control(const ControlGrid& cg, const GridGeometry& target);

/// Adjoint of upsample_control: pulls a per-voxel gradient back onto the
/// control points.
std::vector<Vec3> upsample_control_adjoint(const ControlGrid& cg, const GridDims& dims,
                                           const std::vector<Vec3>& dense_grad);

/// Mean over interior voxels and the three components of
///   fxx^2 + fyy^2 + fzz^2 + 2 (fxy^2 + fxz^2 + fyz^2)
/// with central differences scaled by the grid spacing. Needs dims >= 3.
double bending_energy(const DisplacementField& ddf);

/// d(bending_energy)/d(ddf) per voxel.
std::vector<Vec3> bending_energy_gradient(const DisplacementField& ddf);

struct Similarity {
    double mse = 0.0;
    std::size_t voxels = 0;  // joint-mask size; 0 means the value is a placeholder

    bool empty_mask() const { return voxels == 0; }
};

/// Masked mean squared intensity difference over voxels where both masks are set.
Similarity similarity(const VolumeGrid& a, const VolumeGrid& b);

struct WarpedSimilarity {
    Similarity sim;
    std::vector<Vec3> grad;  // d(mse)/d(ddf), per voxel, mm^-1; empty unless requested
};

/// similarity(warp(moving, ddf), target) evaluated without rounding the warped
/// intensities to float, optionally with its gradient w.r.t. the field.
WarpedSimilarity warped_similarity(const VolumeGrid& moving, const VolumeGrid& target,
                                   const DisplacementField& ddf, bool with_gradient);

}  // namespace fus
