#pragma once

// Scatter-to-grid compounding with the separable hat kernel
//
//   V(n) = sum_i W(x_i - n1) W(y_i - n2) W(z_i - n3) v_i
//          ------------------------------------------------
//          sum_i W(x_i - n1) W(y_i - n2) W(z_i - n3)
//
//   W(u) = max(0, 1 - |u|)
//
// Because W has unit support, each sample only touches the eight vertices of
// the grid cell containing it, so splatting is linear in the sample count.

#include <array>
#include <cstdint>
#include <vector>

#include "fusrecon/geometry.hpp"
#include "fusrecon/scan.hpp"

namespace fus {

struct GridDims {
    int nx = 1, ny = 1, nz = 1;

    int operator[](int axis) const { return axis == 0 ? nx : axis == 1 ? ny : nz; }
    std::size_t count() const {
        return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
    }
    std::size_t index(int i, int j, int k) const {
        return static_cast<std::size_t>(i) +
               static_cast<std::size_t>(nx) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(ny) * k);
    }
    friend bool operator==(const GridDims&, const GridDims&) = default;
};

/// Voxel (0,0,0) sits at `origin`; voxel n sits at origin + n * spacing.
struct GridGeometry {
    Vec3 origin = Vec3::Zero();
    double spacing = 1.0;
    GridDims dims;

    Vec3 world_to_index(const Vec3& p) const { return (p - origin) / spacing; }
    Vec3 index_to_world(const Vec3& n) const { return origin + n * spacing; }
    friend bool operator==(const GridGeometry&, const GridGeometry&) = default;
};

struct VolumeGrid {
    GridGeometry geometry;
    std::vector<float> values;          // x fastest, then y, then z
    std::vector<std::uint8_t> mask;     // 1 where the voxel has support

    VolumeGrid() = default;
    explicit VolumeGrid(const GridGeometry& g)
        : geometry(g), values(g.dims.count(), 0.0f), mask(g.dims.count(), 0) {}

    const GridDims& dims() const { return geometry.dims; }
    std::size_t size() const { return values.size(); }

    /// Throws InvalidArgument on broken invariants (sizes, spacing, non-finite
    /// values, nonzero masked-off voxels).
    void validate() const;
};

struct ScatterSamples {
    PointSet coords;              // continuous voxel-index coordinates
    std::vector<double> values;
};

struct Accumulators {
    GridGeometry geometry;
    std::vector<double> value_sum;
    std::vector<double> weight_sum;
    std::size_t dropped = 0;      // samples outside the grid (drop policy)

    Accumulators() = default;
    explicit Accumulators(const GridGeometry& g)
        : geometry(g), value_sum(g.dims.count(), 0.0), weight_sum(g.dims.count(), 0.0) {}

    /// Adds one sample at continuous index coordinates `p`. Returns false
    /// (and adds nothing) when `p` lies outside [0, dims-1] on any axis.
    bool add(const Vec3& p, double value);
};

enum class OutOfBounds : std::uint8_t { drop, error };

struct SplatOptions {
    OutOfBounds out_of_bounds = OutOfBounds::drop;
    /// 1 = sequential accumulation in sample order. More threads split the
    /// samples into contiguous chunks with private accumulators merged in
    /// chunk order, which is deterministic but not bit-identical to 1.
    unsigned threads = 1;
};

inline constexpr double kDefaultWeightEps = 1e-8;

double hat_weight(double u);

Accumulators splat(const ScatterSamples& samples, const GridGeometry& grid, const SplatOptions& opts = {});

VolumeGrid normalize(const Accumulators& acc, double eps = kDefaultWeightEps);

/// Axis-aligned bounds of `points` grown by `padding_mm`; dims are chosen so
/// every point maps into [0, dims-1] after (p - origin) / spacing.
GridGeometry compute_bounds(const PointSet& points, double spacing, double padding_mm = 0.0);

/// Bounds covering every frame of the scan when placed by `transforms`.
GridGeometry scan_bounds(const ScanSequence& scan, const TransformSet& transforms, double spacing,
                         double padding_mm = 0.0);

/// Every `stride`-th pixel of every frame, in frame-then-pixel order, mapped
/// to voxel-index coordinates of `grid`.
ScatterSamples scan_samples(const ScanSequence& scan, const TransformSet& transforms,
                            const GridGeometry& grid, int stride = 1);

VolumeGrid reconstruct_volume(const ScanSequence& scan, const TransformSet& transforms,
                              const GridGeometry& grid, int stride = 1, const SplatOptions& opts = {},
                              std::size_t* dropped = nullptr);

/// Convenience overload: grid from scan_bounds(scan, transforms, spacing).
VolumeGrid reconstruct_volume(const ScanSequence& scan, const TransformSet& transforms, double spacing,
                              int stride = 1);

/// O(samples * voxels) evaluation of the compounding quotient, voxel by
/// voxel. Test oracle for reconstruct_volume.
VolumeGrid brute_force_reconstruct(const ScatterSamples& samples, const GridGeometry& grid,
                                   double eps = kDefaultWeightEps);

VolumeGrid brute_force_reconstruct(const ScanSequence& scan, const TransformSet& transforms, double spacing,
                                   int stride = 1);

}  // namespace fus
