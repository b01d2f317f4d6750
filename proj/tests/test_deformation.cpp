#include <doctest.h>

#include <cmath>

#include "fusrecon/deformation.hpp"
#include "fusrecon/error.hpp"
#include "support.hpp"

using namespace fus;
using fus::testing::Gen;

namespace {

GridGeometry grid(int nx, int ny, int nz, double spacing = 1.0) { return {Vec3(3, -2, 7), spacing, {nx, ny, nz}}; }

VolumeGrid filled(const GridGeometry& g, double (*f)(int, int, int)) {
    VolumeGrid v(g);
    for (int k = 0; k < g.dims.nz; ++k)
        for (int j = 0; j < g.dims.ny; ++j)
            for (int i = 0; i < g.dims.nx; ++i) {
                v.values[g.dims.index(i, j, k)] = static_cast<float>(f(i, j, k));
                v.mask[g.dims.index(i, j, k)] = 1;
            }
    return v;
}

VolumeGrid random_volume(Gen& gen, const GridGeometry& g, double mask_fraction = 1.0) {
    VolumeGrid v(g);
    for (std::size_t i = 0; i < v.size(); ++i)
        if (gen.uniform(0, 1) < mask_fraction) {
            v.values[i] = static_cast<float>(gen.uniform(0, 1));
            v.mask[i] = 1;
        }
    return v;
}

// Smooth test image so warped similarity is differentiable almost everywhere.
VolumeGrid smooth_volume(const GridGeometry& g, double phase) {
    VolumeGrid v(g);
    for (int k = 0; k < g.dims.nz; ++k)
        for (int j = 0; j < g.dims.ny; ++j)
            for (int i = 0; i < g.dims.nx; ++i) {
                const auto idx = g.dims.index(i, j, k);
                v.values[idx] = static_cast<float>(0.5 + 0.4 * std::sin(0.7 * i + phase) * std::cos(0.5 * j - 0.3 * k));
                v.mask[idx] = 1;
            }
    return v;
}

}  // namespace

TEST_CASE("trilinear sample examples") {
    Gen gen(31);
    const VolumeGrid r = random_volume(gen, grid(4, 5, 3));
    for (int k = 0; k < 3; ++k)
        for (int j = 0; j < 5; ++j)
            for (int i = 0; i < 4; ++i) {
                const auto s = trilinear_sample(r, Vec3(i, j, k));
                CHECK(s.in_bounds);
                CHECK(s.value == r.values[r.dims().index(i, j, k)]);
            }

    const VolumeGrid c = filled(grid(4, 4, 4), [](int, int, int) { return 0.3; });
    for (int t = 0; t < 50; ++t) CHECK(std::abs(trilinear_sample(c, gen.vec(0, 3)).value - double(0.3f)) < 1e-15);

    const VolumeGrid ramp = filled(grid(5, 1, 1), [](int i, int, int) { return double(i); });
    CHECK(trilinear_sample(ramp, Vec3(2.5, 0, 0)).value == 2.5);
    CHECK_FALSE(trilinear_sample(ramp, Vec3(4.01, 0, 0)).in_bounds);
    CHECK_FALSE(trilinear_sample(ramp, Vec3(-0.01, 0, 0)).in_bounds);
    CHECK(trilinear_sample(ramp, Vec3(4, 0, 0)).in_bounds);
}

TEST_CASE("trilinear sample renormalises over masked-in neighbours") {
    VolumeGrid v(grid(2, 1, 1));
    v.values = {0.0f, 0.8f};
    v.mask = {0, 1};
    const auto s = trilinear_sample(v, Vec3(0.3, 0, 0));
    CHECK(s.in_bounds);
    CHECK(std::abs(s.value - double(0.8f)) < 1e-15);
    CHECK_FALSE(trilinear_sample(v, Vec3(0, 0, 0)).in_bounds);
}

TEST_CASE("trilinear sample gradient") {
    Gen gen(32);
    const VolumeGrid v = random_volume(gen, grid(5, 5, 5), 0.8);
    for (int t = 0; t < 200; ++t) {
        const Vec3 p = gen.vec(0.6, 3.4);
        Vec3 grad;
        const auto s = trilinear_sample(v, p, grad);
        if (!s.in_bounds) continue;
        for (int a = 0; a < 3; ++a) {
            // stay inside the current cell so the function is smooth
            const double frac = p[a] - std::floor(p[a]);
            const double h = std::min({1e-5, frac / 2, (1 - frac) / 2});
            Vec3 pp = p, pm = p;
            pp[a] += h;
            pm[a] -= h;
            const double fd = (trilinear_sample(v, pp).value - trilinear_sample(v, pm).value) / (2 * h);
            CHECK(std::abs(fd - grad[a]) < 1e-6 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST_CASE("warp identities") {
    Gen gen(33);
    const VolumeGrid v = random_volume(gen, grid(6, 5, 4), 0.7);
    const DisplacementField zero(v.geometry);
    const VolumeGrid w = warp(v, zero);
    CHECK(w.values == v.values);
    CHECK(w.mask == v.mask);

    const VolumeGrid c = filled(grid(6, 6, 6), [](int, int, int) { return 0.25; });
    DisplacementField smooth(c.geometry);
    for (int k = 0; k < 6; ++k)
        for (int j = 0; j < 6; ++j)
            for (int i = 0; i < 6; ++i)
                smooth.vectors[c.dims().index(i, j, k)] = 0.3 * Vec3(std::sin(i), std::cos(j), std::sin(k + 1.0));
    const VolumeGrid wc = warp(c, smooth);
    for (std::size_t i = 0; i < wc.size(); ++i)
        if (wc.mask[i]) CHECK(wc.values[i] == 0.25f);

    CHECK_THROWS_AS(warp(v, DisplacementField(grid(5, 5, 4))), InvalidArgument);
}

TEST_CASE("warp shifts a ramp") {
    const VolumeGrid ramp = filled(grid(8, 2, 2), [](int i, int, int) { return double(i); });
    DisplacementField d(ramp.geometry);
    for (auto& v : d.vectors) v = Vec3(1, 0, 0);
    const VolumeGrid w = warp(ramp, d);
    for (int i = 0; i < 7; ++i) {
        CHECK(w.mask[ramp.dims().index(i, 1, 1)] == 1);
        CHECK(w.values[ramp.dims().index(i, 1, 1)] == float(i + 1));
    }
    CHECK(w.mask[ramp.dims().index(7, 1, 1)] == 0);

    // Spacing 2 mm: a 1 mm displacement is half a voxel.
    VolumeGrid r2 = filled(grid(8, 2, 2, 2.0), [](int i, int, int) { return double(i); });
    DisplacementField d2(r2.geometry);
    for (auto& v : d2.vectors) v = Vec3(1, 0, 0);
    CHECK(warp(r2, d2).values[r2.dims().index(3, 0, 0)] == 3.5f);
}

TEST_CASE("upsample control") {
    const GridGeometry g = grid(9, 7, 5);
    ControlGrid cg = ControlGrid::covering(g.dims, 4);
    CHECK(cg.dims == GridDims{3, 3, 2});
    const DisplacementField z = upsample_control(cg, g);
    for (const auto& v : z.vectors) CHECK(v == Vec3::Zero());

    // Control points reproduce exactly at their voxels.
    Gen gen(34);
    for (auto& v : cg.values) v = gen.vec(-2, 2);
    const DisplacementField f = upsample_control(cg, g);
    for (int k = 0; k < cg.dims.nz; ++k)
        for (int j = 0; j < cg.dims.ny; ++j)
            for (int i = 0; i < cg.dims.nx; ++i) {
                const int vi = std::min(i * 4, 8), vj = std::min(j * 4, 6), vk = std::min(k * 4, 4);
                if (vi == i * 4 && vj == j * 4 && vk == k * 4)
                    CHECK((f.vectors[g.dims.index(vi, vj, vk)] - cg.values[cg.dims.index(i, j, k)]).norm() < 1e-14);
            }

    // A single unit vector gives a bump whose pieces sum to one with its neighbours.
    ControlGrid one = ControlGrid::covering(g.dims, 4);
    double total_weight = 0;
    for (std::size_t c = 0; c < one.values.size(); ++c) {
        for (auto& v : one.values) v.setZero();
        one.values[c] = Vec3(1, 0, 0);
        const DisplacementField b = upsample_control(one, g);
        total_weight += b.vectors[g.dims.index(5, 3, 2)].x();
    }
    CHECK(std::abs(total_weight - 1.0) < 1e-14);
}

TEST_CASE("upsampling reproduces linear fields") {
    const GridGeometry g = grid(13, 9, 9);
    ControlGrid cg = ControlGrid::covering(g.dims, 4);
    const Mat3 a = (Mat3() << 0.1, -0.2, 0.05, 0.0, 0.3, 0.1, -0.1, 0.02, 0.2).finished();
    const Vec3 b(1, -2, 0.5);
    for (int k = 0; k < cg.dims.nz; ++k)
        for (int j = 0; j < cg.dims.ny; ++j)
            for (int i = 0; i < cg.dims.nx; ++i)
                cg.values[cg.dims.index(i, j, k)] = a * Vec3(4.0 * i, 4.0 * j, 4.0 * k) + b;
    const DisplacementField f = upsample_control(cg, g);
    double worst = 0;
    for (int k = 0; k < 9; ++k)
        for (int j = 0; j < 9; ++j)
            for (int i = 0; i < 13; ++i)
                worst = std::max(worst, (f.vectors[g.dims.index(i, j, k)] - (a * Vec3(i, j, k) + b)).norm());
    CHECK(worst < 1e-12);
}

TEST_CASE("upsample adjoint satisfies the dot-product identity") {
    Gen gen(35);
    const GridGeometry g = grid(10, 7, 6);
    for (int stride : {1, 2, 3, 4}) {
        ControlGrid cg = ControlGrid::covering(g.dims, stride);
        for (auto& v : cg.values) v = gen.vec(-1, 1);
        std::vector<Vec3> y(g.dims.count());
        for (auto& v : y) v = gen.vec(-1, 1);
        const DisplacementField ux = upsample_control(cg, g);
        const std::vector<Vec3> aty = upsample_control_adjoint(cg, g.dims, y);
        double lhs = 0, rhs = 0;
        for (std::size_t i = 0; i < y.size(); ++i) lhs += ux.vectors[i].dot(y[i]);
        for (std::size_t i = 0; i < aty.size(); ++i) rhs += cg.values[i].dot(aty[i]);
        CHECK(std::abs(lhs - rhs) < 1e-10 * std::max(1.0, std::abs(lhs)));
    }
}

TEST_CASE("bending energy examples") {
    const GridGeometry g = grid(6, 5, 4);
    DisplacementField z(g);
    CHECK(bending_energy(z) == 0.0);

    Gen gen(36);
    const Mat3 a = Mat3::Random();
    const Vec3 b = gen.vec(-3, 3);
    DisplacementField affine(g);
    for (int k = 0; k < 4; ++k)
        for (int j = 0; j < 5; ++j)
            for (int i = 0; i < 6; ++i) affine.vectors[g.dims.index(i, j, k)] = a * Vec3(i, j, k) + b;
    CHECK(bending_energy(affine) < 1e-24);

    // phi_x = n1^2: second difference 2 everywhere, squared 4 per voxel for the
    // x component, averaged over three components.
    DisplacementField quad(g);
    for (int k = 0; k < 4; ++k)
        for (int j = 0; j < 5; ++j)
            for (int i = 0; i < 6; ++i) quad.vectors[g.dims.index(i, j, k)] = Vec3(double(i) * i, 0, 0);
    CHECK(bending_energy(quad) == doctest::Approx(4.0 / 3.0).epsilon(1e-14));

    // Units: on a 2 mm grid with phi_x = x_mm^2 the derivative is still 2.
    const GridGeometry g2 = grid(6, 5, 4, 2.0);
    DisplacementField q2(g2);
    for (int k = 0; k < 4; ++k)
        for (int j = 0; j < 5; ++j)
            for (int i = 0; i < 6; ++i) q2.vectors[g2.dims.index(i, j, k)] = Vec3(4.0 * i * i, 0, 0);
    CHECK(bending_energy(q2) == doctest::Approx(4.0 / 3.0).epsilon(1e-14));

    // Mixed term: phi_y = n1 * n2 has d2/dxdy = 1, counted twice.
    DisplacementField mixed(g);
    for (int k = 0; k < 4; ++k)
        for (int j = 0; j < 5; ++j)
            for (int i = 0; i < 6; ++i) mixed.vectors[g.dims.index(i, j, k)] = Vec3(0, double(i) * j, 0);
    CHECK(bending_energy(mixed) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));

    CHECK_THROWS_AS(bending_energy(DisplacementField(grid(2, 5, 5))), InvalidArgument);
}

TEST_CASE("bending energy is invariant to adding affine fields") {
    Gen gen(37);
    const GridGeometry g = grid(6, 6, 5);
    for (int t = 0; t < 10; ++t) {
        DisplacementField f(g);
        for (auto& v : f.vectors) v = gen.vec(-1, 1);
        DisplacementField shifted = f;
        const Mat3 a = Mat3::Random();
        for (int k = 0; k < 5; ++k)
            for (int j = 0; j < 6; ++j)
                for (int i = 0; i < 6; ++i) shifted.vectors[g.dims.index(i, j, k)] += a * Vec3(i, j, k);
        CHECK(bending_energy(shifted) == doctest::Approx(bending_energy(f)).epsilon(1e-10));
    }
}

TEST_CASE("bending energy gradient matches finite differences") {
    Gen gen(38);
    const GridGeometry g = grid(6, 5, 5, 1.5);
    DisplacementField f(g);
    for (auto& v : f.vectors) v = gen.vec(-1, 1);
    const auto grad = bending_energy_gradient(f);
    const double h = 1e-3;
    for (int t = 0; t < 60; ++t) {
        const auto i = static_cast<std::size_t>(gen.integer(0, static_cast<int>(f.vectors.size()) - 1));
        const int a = gen.integer(0, 2);
        DisplacementField p = f, m = f;
        p.vectors[i][a] += h;
        m.vectors[i][a] -= h;
        const double fd = (bending_energy(p) - bending_energy(m)) / (2 * h);
        CHECK(std::abs(fd - grad[i][a]) <= 1e-4 * std::max(std::abs(fd), 1e-6));
    }
}

TEST_CASE("similarity") {
    Gen gen(39);
    const GridGeometry g = grid(5, 4, 3);
    const VolumeGrid a = random_volume(gen, g, 0.8), b = random_volume(gen, g, 0.8);
    CHECK(similarity(a, a).mse == 0.0);
    CHECK(similarity(a, b).mse == similarity(b, a).mse);
    CHECK(similarity(a, b).mse > 0.0);

    const VolumeGrid zero = filled(g, [](int, int, int) { return 0.0; });
    const VolumeGrid one = filled(g, [](int, int, int) { return 1.0; });
    CHECK(similarity(zero, one).mse == 1.0);
    CHECK(similarity(zero, one).voxels == g.dims.count());

    double sum = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a.mask[i] && b.mask[i]) {
            const double d = double(a.values[i]) - double(b.values[i]);
            sum += d * d;
            ++n;
        }
    CHECK(std::abs(similarity(a, b).mse - sum / double(n)) < 1e-12);

    const VolumeGrid empty(g);
    CHECK(similarity(a, empty).empty_mask());
    CHECK(similarity(a, empty).mse == 0.0);
    CHECK_THROWS_AS(similarity(a, VolumeGrid(grid(5, 4, 4))), InvalidArgument);
}

TEST_CASE("warped similarity agrees with warp then similarity") {
    Gen gen(40);
    const GridGeometry g = grid(7, 6, 5);
    const VolumeGrid moving = random_volume(gen, g, 0.9), target = random_volume(gen, g, 0.9);
    DisplacementField d(g);
    for (auto& v : d.vectors) v = gen.vec(-0.7, 0.7);
    const auto ws = warped_similarity(moving, target, d, false);
    const auto ref = similarity(warp(moving, d), target);
    CHECK(ws.sim.voxels == ref.voxels);
    CHECK(ws.sim.mse == doctest::Approx(ref.mse).epsilon(1e-6));
}

TEST_CASE("warped similarity gradient matches finite differences") {
    Gen gen(41);
    for (double spacing : {1.0, 2.0}) {
        const GridGeometry g = grid(8, 7, 6, spacing);
        const VolumeGrid moving = smooth_volume(g, 0.0), target = smooth_volume(g, 0.4);
        DisplacementField d(g);
        // Keep sample points away from cell boundaries where the interpolant kinks.
        for (auto& v : d.vectors) v = spacing * Vec3(0.5 + gen.uniform(-0.2, 0.2), 0.5 + gen.uniform(-0.2, 0.2),
                                                     0.5 + gen.uniform(-0.2, 0.2));
        const auto ws = warped_similarity(moving, target, d, true);
        const double h = 1e-3;
        for (int t = 0; t < 40; ++t) {
            const auto i = static_cast<std::size_t>(gen.integer(0, static_cast<int>(d.vectors.size()) - 1));
            const int a = gen.integer(0, 2);
            DisplacementField p = d, m = d;
            p.vectors[i][a] += h;
            m.vectors[i][a] -= h;
            const double fd = (warped_similarity(moving, target, p, false).sim.mse -
                               warped_similarity(moving, target, m, false).sim.mse) / (2 * h);
            CHECK(std::abs(fd - ws.grad[i][a]) <= 1e-4 * std::max(std::abs(fd), 1e-7));
        }
    }
}

TEST_CASE("inverse displacement") {
    Gen gen(42);
    const GridGeometry g = grid(10, 10, 10, 2.0);
    DisplacementField d(g);
    for (int k = 0; k < 10; ++k)
        for (int j = 0; j < 10; ++j)
            for (int i = 0; i < 10; ++i)
                d.vectors[g.dims.index(i, j, k)] = Vec3(std::sin(0.3 * j), 0.5 * std::cos(0.2 * k), 0.2 * i / 10.0);
    for (int t = 0; t < 50; ++t) {
        const Vec3 y = g.index_to_world(gen.vec(2, 7));
        const Vec3 q = inverse_displace(d, y);
        CHECK((q + d.at(g.world_to_index(q)) - y).norm() < 1e-9);
    }
}
