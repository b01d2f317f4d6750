#include "fusrecon/compounding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>

#include "fusrecon/error.hpp"

namespace fus {

double hat_weight(double u) {
    const double a = std::abs(u);
    return a <= 1.0 ? 1.0 - a : 0.0;
}

void VolumeGrid::validate() const {
    const auto& g = geometry;
    if (!(g.spacing > 0) || !std::isfinite(g.spacing)) throw InvalidArgument("volume spacing must be positive");
    if (g.dims.nx < 1 || g.dims.ny < 1 || g.dims.nz < 1) throw InvalidArgument("volume dims must be >= 1");
    if (!g.origin.allFinite()) throw InvalidArgument("volume origin must be finite");
    if (values.size() != g.dims.count() || mask.size() != g.dims.count())
        throw InvalidArgument("volume payload size does not match dims");
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) throw InvalidArgument("volume contains non-finite values");
        if (!mask[i] && values[i] != 0.0f) throw InvalidArgument("masked-off voxel holds a nonzero value");
    }
}

bool Accumulators::add(const Vec3& p, double value) {
    const GridDims& d = geometry.dims;
    const double x = p.x(), y = p.y(), z = p.z();
    if (!(x >= 0 && x <= d.nx - 1 && y >= 0 && y <= d.ny - 1 && z >= 0 && z <= d.nz - 1)) return false;

    const int i0 = static_cast<int>(x), j0 = static_cast<int>(y), k0 = static_cast<int>(z);
    // Same expression as hat_weight(x - n) for the two vertices of the cell,
    // so the voxel-wise oracle reproduces these sums bit for bit.
    const double wx[2] = {1.0 - (x - i0), 1.0 - ((i0 + 1) - x)};
    const double wy[2] = {1.0 - (y - j0), 1.0 - ((j0 + 1) - y)};
    const double wz[2] = {1.0 - (z - k0), 1.0 - ((k0 + 1) - z)};
    const int ni = i0 + 1 < d.nx ? 2 : 1;
    const int nj = j0 + 1 < d.ny ? 2 : 1;
    const int nk = k0 + 1 < d.nz ? 2 : 1;

    for (int c = 0; c < nk; ++c) {
        for (int b = 0; b < nj; ++b) {
            std::size_t idx = d.index(i0, j0 + b, k0 + c);
            for (int a = 0; a < ni; ++a, ++idx) {
                const double w = wx[a] * wy[b] * wz[c];
                weight_sum[idx] += w;
                value_sum[idx] += w * value;
            }
        }
    }
    return true;
}

namespace {

void splat_range(const ScatterSamples& s, std::size_t begin, std::size_t end, Accumulators& acc,
                 OutOfBounds policy) {
    for (std::size_t i = begin; i < end; ++i) {
        if (!acc.add(s.coords[i], s.values[i])) {
            if (policy == OutOfBounds::error)
                throw InvalidArgument("splat: sample " + std::to_string(i) + " lies outside the grid");
            ++acc.dropped;
        }
    }
}

}  // namespace

Accumulators splat(const ScatterSamples& samples, const GridGeometry& grid, const SplatOptions& opts) {
    if (samples.coords.size() != samples.values.size())
        throw InvalidArgument("splat: coords and values differ in length");
    Accumulators acc(grid);
    const std::size_t n = samples.coords.size();
    const unsigned threads = std::max(1u, opts.threads);
    if (threads == 1 || n < 2 * threads) {
        splat_range(samples, 0, n, acc, opts.out_of_bounds);
        return acc;
    }

    std::vector<Accumulators> partial(threads, Accumulators(grid));
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                splat_range(samples, t * chunk, std::min(n, (t + 1) * chunk), partial[t], opts.out_of_bounds);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    for (const auto& p : partial) {
        for (std::size_t v = 0; v < acc.value_sum.size(); ++v) {
            acc.value_sum[v] += p.value_sum[v];
            acc.weight_sum[v] += p.weight_sum[v];
        }
        acc.dropped += p.dropped;
    }
    return acc;
}

VolumeGrid normalize(const Accumulators& acc, double eps) {
    if (!(eps > 0)) throw InvalidArgument("normalize: eps must be positive");
    VolumeGrid vol(acc.geometry);
    for (std::size_t i = 0; i < vol.values.size(); ++i) {
        if (acc.weight_sum[i] > eps) {
            vol.values[i] = static_cast<float>(acc.value_sum[i] / acc.weight_sum[i]);
            vol.mask[i] = 1;
        }
    }
    return vol;
}

GridGeometry compute_bounds(const PointSet& points, double spacing, double padding_mm) {
    if (points.empty()) throw InvalidArgument("compute_bounds: empty point set");
    if (!(spacing > 0)) throw InvalidArgument("compute_bounds: spacing must be positive");
    if (!(padding_mm >= 0)) throw InvalidArgument("compute_bounds: padding must be non-negative");
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (const auto& p : points) {
        if (!p.allFinite()) throw InvalidArgument("compute_bounds: non-finite point");
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    GridGeometry g;
    g.spacing = spacing;
    g.origin = lo - Vec3::Constant(padding_mm);
    int dims[3];
    for (int a = 0; a < 3; ++a) {
        const double extent = (hi[a] + padding_mm - g.origin[a]) / spacing;
        int n = static_cast<int>(std::ceil(extent)) + 1;
        // Guard against rounding in (p - origin) / spacing at the far edge.
        while ((hi[a] - g.origin[a]) / spacing > n - 1) ++n;
        dims[a] = std::max(1, n);
    }
    g.dims = {dims[0], dims[1], dims[2]};
    return g;
}

GridGeometry scan_bounds(const ScanSequence& scan, const TransformSet& transforms, double spacing,
                         double padding_mm) {
    if (transforms.size() != scan.frame_count())
        throw InvalidArgument("scan_bounds: need one transform per frame");
    // Frames are planar rectangles, so their corners bound every pixel.
    PointSet corners;
    corners.reserve(4 * transforms.size());
    for (std::size_t m = 0; m < transforms.size(); ++m) {
        auto c = corner_landmarks(scan.dims, scan.calib, transforms[m]);
        corners.insert(corners.end(), c.begin(), c.end());
    }
    return compute_bounds(corners, spacing, padding_mm);
}

ScatterSamples scan_samples(const ScanSequence& scan, const TransformSet& transforms, const GridGeometry& grid,
                            int stride) {
    if (transforms.size() != scan.frame_count())
        throw InvalidArgument("scan_samples: need one transform per frame");
    const PointSet pix = pixel_grid(scan.dims, stride);
    const PointSet tool = transform_points(pix, scan.calib.image_to_tool);
    ScatterSamples s;
    s.coords.reserve(pix.size() * transforms.size());
    s.values.reserve(pix.size() * transforms.size());
    for (std::size_t m = 0; m < transforms.size(); ++m) {
        const auto frame = scan.frame(m);
        const auto& t = transforms[m];
        for (std::size_t n = 0; n < pix.size(); ++n) {
            const auto u = static_cast<std::size_t>(pix[n].x());
            const auto v = static_cast<std::size_t>(pix[n].y());
            s.coords.push_back(grid.world_to_index(transform_point(t, tool[n])));
            s.values.push_back(frame[v * static_cast<std::size_t>(scan.dims.width) + u]);
        }
    }
    return s;
}

VolumeGrid reconstruct_volume(const ScanSequence& scan, const TransformSet& transforms, const GridGeometry& grid,
                              int stride, const SplatOptions& opts, std::size_t* dropped) {
    if (transforms.size() != scan.frame_count())
        throw InvalidArgument("reconstruct_volume: need one transform per frame");
    Accumulators acc;
    if (opts.threads > 1) {
        acc = splat(scan_samples(scan, transforms, grid, stride), grid, opts);
    } else {
        // Streams samples straight into the accumulators in frame-then-pixel
        // order; identical to splat(scan_samples(...)) without the buffer.
        acc = Accumulators(grid);
        const PointSet tool = transform_points(pixel_grid(scan.dims, stride), scan.calib.image_to_tool);
        const auto w = static_cast<std::size_t>(scan.dims.width);
        for (std::size_t m = 0; m < transforms.size(); ++m) {
            const auto frame = scan.frame(m);
            std::size_t n = 0;
            for (int v = 0; v < scan.dims.height; v += stride) {
                for (int u = 0; u < scan.dims.width; u += stride, ++n) {
                    const Vec3 p = grid.world_to_index(transform_point(transforms[m], tool[n]));
                    if (!acc.add(p, frame[static_cast<std::size_t>(v) * w + static_cast<std::size_t>(u)])) {
                        if (opts.out_of_bounds == OutOfBounds::error)
                            throw InvalidArgument("reconstruct_volume: frame " + std::to_string(m) +
                                                  " places pixels outside the grid");
                        ++acc.dropped;
                    }
                }
            }
        }
    }
    if (dropped) *dropped = acc.dropped;
    return normalize(acc);
}

VolumeGrid reconstruct_volume(const ScanSequence& scan, const TransformSet& transforms, double spacing, int stride) {
    return reconstruct_volume(scan, transforms, scan_bounds(scan, transforms, spacing), stride);
}

VolumeGrid brute_force_reconstruct(const ScatterSamples& samples, const GridGeometry& grid, double eps) {
    VolumeGrid vol(grid);
    const GridDims& d = grid.dims;
    for (int k = 0; k < d.nz; ++k) {
        for (int j = 0; j < d.ny; ++j) {
            for (int i = 0; i < d.nx; ++i) {
                double num = 0.0, den = 0.0;
                for (std::size_t s = 0; s < samples.coords.size(); ++s) {
                    const Vec3& p = samples.coords[s];
                    const double w = hat_weight(p.x() - i) * hat_weight(p.y() - j) * hat_weight(p.z() - k);
                    if (w == 0.0) continue;
                    den += w;
                    num += w * samples.values[s];
                }
                const std::size_t idx = d.index(i, j, k);
                if (den > eps) {
                    vol.values[idx] = static_cast<float>(num / den);
                    vol.mask[idx] = 1;
                }
            }
        }
    }
    return vol;
}

VolumeGrid brute_force_reconstruct(const ScanSequence& scan, const TransformSet& transforms, double spacing,
                                   int stride) {
    const GridGeometry grid = scan_bounds(scan, transforms, spacing);
    return brute_force_reconstruct(scan_samples(scan, transforms, grid, stride), grid);
}

}  // namespace fus
