#include "fusrecon/deformation.hpp"

#include <algorithm>
#include <cmath>

#include "fusrecon/error.hpp"

namespace fus {

namespace {

// Lower cell vertex and fractional offset along one axis of length n, for a
// coordinate already known to lie in [0, n-1].
struct Cell {
    int lo;
    double frac;
};

inline Cell cell_of(double c, int n) {
    if (n < 2) return {0, 0.0};
    const int lo = std::min(static_cast<int>(c), n - 2);
    return {lo, c - lo};
}

void require_same_dims(const GridDims& a, const GridDims& b, const char* what) {
    if (!(a == b)) throw InvalidArgument(std::string(what) + ": grid dimensions differ");
}

}  // namespace

Vec3 DisplacementField::at(const Vec3& index) const {
    const GridDims& d = geometry.dims;
    Cell c[3];
    for (int a = 0; a < 3; ++a) c[a] = cell_of(std::clamp(index[a], 0.0, double(d[a] - 1)), d[a]);
    Vec3 out = Vec3::Zero();
    for (int dz = 0; dz < 2; ++dz) {
        const double wz = dz ? c[2].frac : 1.0 - c[2].frac;
        if (wz == 0.0) continue;
        for (int dy = 0; dy < 2; ++dy) {
            const double wy = dy ? c[1].frac : 1.0 - c[1].frac;
            if (wy == 0.0) continue;
            for (int dx = 0; dx < 2; ++dx) {
                const double wx = dx ? c[0].frac : 1.0 - c[0].frac;
                if (wx == 0.0) continue;
                out += wx * wy * wz * vectors[d.index(c[0].lo + dx, c[1].lo + dy, c[2].lo + dz)];
            }
        }
    }
    return out;
}

ControlGrid ControlGrid::covering(const GridDims& volume_dims, int stride) {
    if (stride < 1) throw InvalidArgument("control grid stride must be >= 1");
    ControlGrid cg;
    cg.stride = stride;
    int n[3];
    for (int a = 0; a < 3; ++a) n[a] = std::max(2, (volume_dims[a] - 1 + stride - 1) / stride + 1);
    cg.dims = {n[0], n[1], n[2]};
    cg.values.assign(cg.dims.count(), Vec3::Zero());
    return cg;
}

TrilinearSample trilinear_sample(const VolumeGrid& vol, const Vec3& p, Vec3& grad) {
    grad.setZero();
    const GridDims& d = vol.dims();
    for (int a = 0; a < 3; ++a)
        if (!(p[a] >= 0.0 && p[a] <= d[a] - 1)) return {};

    const Cell cx = cell_of(p.x(), d.nx), cy = cell_of(p.y(), d.ny), cz = cell_of(p.z(), d.nz);
    const double wx[2] = {1.0 - cx.frac, cx.frac};
    const double wy[2] = {1.0 - cy.frac, cy.frac};
    const double wz[2] = {1.0 - cz.frac, cz.frac};
    // Derivatives vanish along degenerate (single-voxel) axes.
    const double gx[2] = {d.nx > 1 ? -1.0 : 0.0, d.nx > 1 ? 1.0 : 0.0};
    const double gy[2] = {d.ny > 1 ? -1.0 : 0.0, d.ny > 1 ? 1.0 : 0.0};
    const double gz[2] = {d.nz > 1 ? -1.0 : 0.0, d.nz > 1 ? 1.0 : 0.0};

    double num = 0.0, den = 0.0;
    Vec3 dnum = Vec3::Zero(), dden = Vec3::Zero();
    for (int c = 0; c < (d.nz > 1 ? 2 : 1); ++c) {
        for (int b = 0; b < (d.ny > 1 ? 2 : 1); ++b) {
            for (int a = 0; a < (d.nx > 1 ? 2 : 1); ++a) {
                const std::size_t idx = d.index(cx.lo + a, cy.lo + b, cz.lo + c);
                if (!vol.mask[idx]) continue;
                const double v = vol.values[idx];
                const double w = wx[a] * wy[b] * wz[c];
                const Vec3 dw(gx[a] * wy[b] * wz[c], wx[a] * gy[b] * wz[c], wx[a] * wy[b] * gz[c]);
                num += w * v;
                den += w;
                dnum += dw * v;
                dden += dw;
            }
        }
    }
    if (den <= 1e-9) return {};
    const double value = num / den;
    grad = (dnum - value * dden) / den;
    return {value, true};
}

TrilinearSample trilinear_sample(const VolumeGrid& vol, const Vec3& p) {
    Vec3 unused;
    return trilinear_sample(vol, p, unused);
}

VolumeGrid warp(const VolumeGrid& vol, const DisplacementField& ddf) {
    require_same_dims(vol.dims(), ddf.dims(), "warp");
    VolumeGrid out(vol.geometry);
    const GridDims& d = vol.dims();
    const double inv_h = 1.0 / vol.geometry.spacing;
    for (int k = 0; k < d.nz; ++k)
        for (int j = 0; j < d.ny; ++j)
            for (int i = 0; i < d.nx; ++i) {
                const std::size_t idx = d.index(i, j, k);
                const auto s = trilinear_sample(vol, Vec3(i, j, k) + ddf.vectors[idx] * inv_h);
                if (s.in_bounds) {
                    out.values[idx] = static_cast<float>(s.value);
                    out.mask[idx] = 1;
                }
            }
    return out;
}

Vec3 inverse_displace(const DisplacementField& ddf, const Vec3& y, int iterations) {
    Vec3 q = y;
    for (int it = 0; it < iterations; ++it) {
        const Vec3 next = y - ddf.at(ddf.geometry.world_to_index(q));
        const bool done = (next - q).norm() < 1e-12;
        q = next;
        if (done) break;
    }
    return q;
}

namespace {

// Separable 1D interpolation weights from control points to voxels.
std::vector<Cell> control_cells(int voxels, int controls, int stride) {
    std::vector<Cell> cells(static_cast<std::size_t>(voxels));
    for (int n = 0; n < voxels; ++n) {
        const double c = static_cast<double>(n) / stride;
        cells[static_cast<std::size_t>(n)] = cell_of(std::min(c, double(controls - 1)), controls);
    }
    return cells;
}

template <class Fn>
void for_each_control_weight(const ControlGrid& cg, const GridDims& dims, Fn&& fn) {
    const auto cx = control_cells(dims.nx, cg.dims.nx, cg.stride);
    const auto cy = control_cells(dims.ny, cg.dims.ny, cg.stride);
    const auto cz = control_cells(dims.nz, cg.dims.nz, cg.stride);
    for (int k = 0; k < dims.nz; ++k) {
        const Cell z = cz[static_cast<std::size_t>(k)];
        for (int j = 0; j < dims.ny; ++j) {
            const Cell y = cy[static_cast<std::size_t>(j)];
            for (int i = 0; i < dims.nx; ++i) {
                const Cell x = cx[static_cast<std::size_t>(i)];
                const std::size_t vox = dims.index(i, j, k);
                for (int c = 0; c < 2; ++c) {
                    const double wz = c ? z.frac : 1.0 - z.frac;
                    if (wz == 0.0) continue;
                    for (int b = 0; b < 2; ++b) {
                        const double wy = b ? y.frac : 1.0 - y.frac;
                        if (wy == 0.0) continue;
                        for (int a = 0; a < 2; ++a) {
                            const double wx = a ? x.frac : 1.0 - x.frac;
                            if (wx == 0.0) continue;
                            fn(vox, cg.dims.index(x.lo + a, y.lo + b, z.lo + c), wx * wy * wz);
                        }
                    }
                }
            }
        }
    }
}

void check_control(const ControlGrid& cg, const GridDims& dims) {
    if (cg.stride < 1) throw InvalidArgument("control grid stride must be >= 1");
    if (cg.dims.nx < 2 || cg.dims.ny < 2 || cg.dims.nz < 2)
        throw InvalidArgument("control grid needs at least 2 points per axis");
    if (cg.values.size() != cg.dims.count()) throw InvalidArgument("control grid payload size mismatch");
    for (int a = 0; a < 3; ++a)
        if ((cg.dims[a] - 1) * cg.stride < dims[a] - 1)
            throw InvalidArgument("control grid does not cover the target grid");
}

}  // namespace

DisplacementField upsample_control(const ControlGrid& cg, const GridGeometry& target) {
    check_control(cg, target.dims);
    DisplacementField ddf(target);
    for_each_control_weight(cg, target.dims, [&](std::size_t vox, std::size_t ctl, double w) {
        ddf.vectors[vox] += w * cg.values[ctl];
    });
    return ddf;
}

std::vector<Vec3> upsample_control_adjoint(const ControlGrid& cg, const GridDims& dims,
                                           const std::vector<Vec3>& dense_grad) {
    check_control(cg, dims);
    if (dense_grad.size() != dims.count()) throw InvalidArgument("dense gradient size mismatch");
    std::vector<Vec3> out(cg.values.size(), Vec3::Zero());
    for_each_control_weight(cg, dims, [&](std::size_t vox, std::size_t ctl, double w) {
        out[ctl] += w * dense_grad[vox];
    });
    return out;
}

namespace {

// One second-derivative central difference as flat-index offsets.
struct Stencil {
    std::ptrdiff_t offset[4];
    double coeff[4];
    int size;
    double weight;  // 1 for pure terms, 2 for mixed terms
};

std::array<Stencil, 6> bending_stencils(const GridDims& d, double h) {
    const std::ptrdiff_t sx = 1, sy = d.nx, sz = static_cast<std::ptrdiff_t>(d.nx) * d.ny;
    const double p = 1.0 / (h * h), m = 1.0 / (4.0 * h * h);
    auto pure = [&](std::ptrdiff_t s) { return Stencil{{-s, 0, s, 0}, {p, -2 * p, p, 0}, 3, 1.0}; };
    auto mixed = [&](std::ptrdiff_t s, std::ptrdiff_t t) {
        return Stencil{{s + t, s - t, -s + t, -s - t}, {m, -m, -m, m}, 4, 2.0};
    };
    return {pure(sx), pure(sy), pure(sz), mixed(sx, sy), mixed(sx, sz), mixed(sy, sz)};
}

std::size_t interior_count(const GridDims& d) {
    if (d.nx < 3 || d.ny < 3 || d.nz < 3)
        throw InvalidArgument("bending energy needs at least 3 voxels per axis");
    return static_cast<std::size_t>(d.nx - 2) * static_cast<std::size_t>(d.ny - 2) *
           static_cast<std::size_t>(d.nz - 2);
}

}  // namespace

double bending_energy(const DisplacementField& ddf) {
    const GridDims& d = ddf.dims();
    const double norm = 1.0 / (3.0 * static_cast<double>(interior_count(d)));
    const auto stencils = bending_stencils(d, ddf.geometry.spacing);
    const Vec3* v = ddf.vectors.data();
    double total = 0.0;
    for (int k = 1; k < d.nz - 1; ++k)
        for (int j = 1; j < d.ny - 1; ++j)
            for (int i = 1; i < d.nx - 1; ++i) {
                const auto idx = static_cast<std::ptrdiff_t>(d.index(i, j, k));
                for (const auto& s : stencils) {
                    Vec3 t = Vec3::Zero();
                    for (int q = 0; q < s.size; ++q) t += s.coeff[q] * v[idx + s.offset[q]];
                    total += s.weight * t.squaredNorm();
                }
            }
    return total * norm;
}

std::vector<Vec3> bending_energy_gradient(const DisplacementField& ddf) {
    const GridDims& d = ddf.dims();
    const double norm = 1.0 / (3.0 * static_cast<double>(interior_count(d)));
    const auto stencils = bending_stencils(d, ddf.geometry.spacing);
    const Vec3* v = ddf.vectors.data();
    std::vector<Vec3> grad(ddf.vectors.size(), Vec3::Zero());
    for (int k = 1; k < d.nz - 1; ++k)
        for (int j = 1; j < d.ny - 1; ++j)
            for (int i = 1; i < d.nx - 1; ++i) {
                const auto idx = static_cast<std::ptrdiff_t>(d.index(i, j, k));
                for (const auto& s : stencils) {
                    Vec3 t = Vec3::Zero();
                    for (int q = 0; q < s.size; ++q) t += s.coeff[q] * v[idx + s.offset[q]];
                    const Vec3 g = (2.0 * s.weight * norm) * t;
                    for (int q = 0; q < s.size; ++q) grad[static_cast<std::size_t>(idx + s.offset[q])] += s.coeff[q] * g;
                }
            }
    return grad;
}

Similarity similarity(const VolumeGrid& a, const VolumeGrid& b) {
    require_same_dims(a.dims(), b.dims(), "similarity");
    Similarity out;
    double sum = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        if (!a.mask[i] || !b.mask[i]) continue;
        const double diff = static_cast<double>(a.values[i]) - static_cast<double>(b.values[i]);
        sum += diff * diff;
        ++out.voxels;
    }
    out.mse = out.voxels ? sum / static_cast<double>(out.voxels) : 0.0;
    return out;
}

WarpedSimilarity warped_similarity(const VolumeGrid& moving, const VolumeGrid& target,
                                   const DisplacementField& ddf, bool with_gradient) {
    require_same_dims(moving.dims(), target.dims(), "warped_similarity");
    require_same_dims(moving.dims(), ddf.dims(), "warped_similarity");
    WarpedSimilarity out;
    if (with_gradient) out.grad.assign(ddf.vectors.size(), Vec3::Zero());
    const GridDims& d = moving.dims();
    const double inv_h = 1.0 / moving.geometry.spacing;
    double sum = 0.0;
    Vec3 g;
    for (int k = 0; k < d.nz; ++k)
        for (int j = 0; j < d.ny; ++j)
            for (int i = 0; i < d.nx; ++i) {
                const std::size_t idx = d.index(i, j, k);
                if (!target.mask[idx]) continue;
                const auto s = trilinear_sample(moving, Vec3(i, j, k) + ddf.vectors[idx] * inv_h, g);
                if (!s.in_bounds) continue;
                const double diff = s.value - static_cast<double>(target.values[idx]);
                sum += diff * diff;
                ++out.sim.voxels;
                if (with_gradient) out.grad[idx] = (2.0 * diff * inv_h) * g;
            }
    if (out.sim.voxels) {
        const double inv_k = 1.0 / static_cast<double>(out.sim.voxels);
        out.sim.mse = sum * inv_k;
        for (auto& v : out.grad) v *= inv_k;
    }
    return out;
}

}  // namespace fus
