#include <doctest.h>

#include <cmath>
#include <numbers>

#include "fusrecon/error.hpp"
#include "fusrecon/objectives.hpp"
#include "fusrecon/phantom.hpp"
#include "fusrecon/solver.hpp"
#include "support.hpp"

using namespace fus;
using fus::testing::Gen;

namespace {

SimulationConfig small_config(std::uint64_t seed, double motion_mm = 0.0) {
    SimulationConfig c;
    c.dims = {24, 18};
    c.pixel_spacing_mm = 1.0;
    c.trajectory.frames = 8;
    c.trajectory.length_mm = 14.0;
    c.placement = SimulationConfig::default_placement();
    c.seed = seed;
    c.motion.amplitude_mm = motion_mm;
    c.motion.smoothness_mm = 10.0;
    c.motion.seed = seed + 1;
    return c;
}

struct Fixture {
    SimulatedScan sim;
    Problem problem;

    explicit Fixture(const SimulationConfig& c, double spacing = 2.0, int volume_stride = 2) : sim(simulate_scan(c)) {
        problem.scan = &sim.scan;
        problem.gt = sim.gt;
        problem.gt_vol = reconstruct_volume(sim.scan, sim.gt, scan_bounds(sim.scan, sim.gt, spacing), volume_stride);
    }
};

SolverConfig quick(SolverMode mode, int iters) {
    SolverConfig c;
    c.mode = mode;
    c.learning_rate = 1e-2;
    c.max_iters = iters;
    c.check_gradients = false;
    return c;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

}  // namespace

TEST_CASE("L_recon gradient vanishes at the ground truth") {
    Fixture f(small_config(1));
    const auto rg = grad_loss_recon(f.sim.gt.to_params(), f.sim.gt, f.sim.scan.calib, f.sim.scan.dims, 1);
    CHECK(rg.loss < 1e-24);
    for (const auto& g : rg.grad)
        for (double v : g) CHECK(std::abs(v) < 1e-10);
}

TEST_CASE("L_recon gradient for a pure translation offset") {
    // Pixel set centred on the tool origin: sum of tool points is zero.
    const FrameDims dims{9, 7};
    RigidMatrix centre = RigidMatrix::Identity();
    centre.topRightCorner<3, 1>() = Vec3(-4.0 * 0.5, -3.0 * 0.5, 0.0);
    const Calibration calib = Calibration::from_rigid(centre, 0.5, 0.5);
    TransformSet gt;
    for (int m = 0; m < 5; ++m) gt.transforms.push_back(params_to_matrix({0, 0, 2.0 * m, 0, 0, 0}));
    auto params = gt.to_params();
    const Vec3 d(0.3, -0.2, 0.5);
    params[2].tx += d.x();
    params[2].ty += d.y();
    params[2].tz += d.z();
    const auto rg = grad_loss_recon(params, gt, calib, dims, 1);
    for (int a = 0; a < 3; ++a) CHECK(rg.grad[2][static_cast<std::size_t>(a)] == doctest::Approx(2.0 * d[a] / 5.0).epsilon(1e-12));
    for (int a = 3; a < 6; ++a) CHECK(std::abs(rg.grad[2][static_cast<std::size_t>(a)]) < 1e-12);
    for (std::size_t m : {0u, 1u, 3u, 4u})
        for (double v : rg.grad[m]) CHECK(v == 0.0);
    CHECK(rg.loss == doctest::Approx(d.squaredNorm() / 5.0).epsilon(1e-12));
}

TEST_CASE("L_recon gradient matches central differences") {
    Gen g(71);
    for (int t = 0; t < 5; ++t) {
        const FrameDims dims{g.integer(4, 12), g.integer(4, 12)};
        const Calibration calib = Calibration::from_rigid(g.rigid(10, 0.3), g.uniform(0.3, 1), g.uniform(0.3, 1));
        TransformSet gt;
        gt.transforms.push_back(RigidMatrix::Identity());
        for (int m = 1; m < 5; ++m) gt.transforms.push_back(gt.transforms.back() * g.rigid(3, 0.1));
        auto params = gt.to_params();
        for (std::size_t m = 1; m < params.size(); ++m)
            for (int k = 0; k < 6; ++k) params[m][k] += k < 3 ? g.normal(1.0) : g.normal(0.02);
        const auto rg = grad_loss_recon(params, gt, calib, dims, 2);
        CHECK(rg.loss == doctest::Approx(loss_recon(TransformSet::from_params(params), gt, calib, dims, 2)).epsilon(1e-10));
        for (std::size_t m = 1; m < params.size(); ++m)
            for (int k = 0; k < 6; ++k) {
                const double h = k < 3 ? 1e-4 : 1e-6;
                auto p = params, q = params;
                p[m][k] += h;
                q[m][k] -= h;
                const double fd = (grad_loss_recon(p, gt, calib, dims, 2).loss - grad_loss_recon(q, gt, calib, dims, 2).loss) / (2 * h);
                CHECK(rel_err(fd, rg.grad[m][static_cast<std::size_t>(k)]) < 1e-4);
            }
    }
}

TEST_CASE("L_def gradient") {
    Gen g(72);
    const GridGeometry geom{Vec3::Zero(), 2.0, {10, 9, 8}};
    VolumeGrid moving(geom), target(geom);
    for (int k = 0; k < 8; ++k)
        for (int j = 0; j < 9; ++j)
            for (int i = 0; i < 10; ++i) {
                const auto idx = geom.dims.index(i, j, k);
                moving.values[idx] = static_cast<float>(0.5 + 0.4 * std::sin(0.6 * i) * std::cos(0.4 * j + 0.2 * k));
                target.values[idx] = static_cast<float>(0.5 + 0.4 * std::sin(0.6 * i + 0.3) * std::cos(0.4 * j));
                moving.mask[idx] = target.mask[idx] = 1;
            }

    SUBCASE("zero at the optimum with an affine field") {
        ControlGrid cg = ControlGrid::covering(geom.dims, 3);
        const auto dg = grad_loss_def(moving, moving, cg);
        CHECK(dg.loss == 0.0);
        for (const auto& v : dg.grad) CHECK(v == Vec3::Zero());
    }

    SUBCASE("zero field gives the pure similarity gradient") {
        ControlGrid cg = ControlGrid::covering(geom.dims, 3);
        const auto dg = grad_loss_def(moving, target, cg);
        const auto ws = warped_similarity(moving, target, upsample_control(cg, geom), true);
        const auto pulled = upsample_control_adjoint(cg, geom.dims, ws.grad);
        CHECK(dg.smooth == 0.0);
        for (std::size_t i = 0; i < pulled.size(); ++i) CHECK((dg.grad[i] - pulled[i]).norm() < 1e-15);
    }

    SUBCASE("matches central differences") {
        ControlGrid cg = ControlGrid::covering(geom.dims, 3);
        for (auto& v : cg.values)
            v = geom.spacing * Vec3(0.5 + g.uniform(-0.2, 0.2), 0.5 + g.uniform(-0.2, 0.2), 0.5 + g.uniform(-0.2, 0.2));
        const auto dg = grad_loss_def(moving, target, cg, 0.7);
        const double h = 1e-3;
        for (std::size_t i = 0; i < cg.values.size(); ++i)
            for (int a = 0; a < 3; ++a) {
                ControlGrid p = cg, m = cg;
                p.values[i][a] += h;
                m.values[i][a] -= h;
                const double fd = (grad_loss_def(moving, target, p, 0.7).loss - grad_loss_def(moving, target, m, 0.7).loss) / (2 * h);
                CHECK(rel_err(fd, dg.grad[i][a]) < 1e-4);
            }
    }
}

TEST_CASE("adaptive alpha") {
    CHECK(adaptive_alpha(2.0, 2.0) == doctest::Approx(1.0));
    CHECK(adaptive_alpha(10.0, 0.01) == doctest::Approx(1000.0).epsilon(1e-9));
    CHECK(adaptive_alpha(5.0, 0.0) == 1e6);
    CHECK(adaptive_alpha(0.0, 0.0) == 1.0);
    CHECK(adaptive_alpha(1e-3, 1.0) == 1.0);
    CHECK(std::isfinite(adaptive_alpha(1e300, 0.0)));
}

TEST_CASE("adam step") {
    std::vector<double> x{1.0, -2.0, 3.0};
    AdamMoments m(3);
    const std::vector<double> zero(3, 0.0);
    adam_step(x, zero, m, 0.1);
    CHECK(x == std::vector<double>{1.0, -2.0, 3.0});

    AdamMoments m2(3);
    std::vector<double> y{0.0, 0.0, 0.0};
    const std::vector<double> unit{1.0, -1.0, 1.0};
    adam_step(y, unit, m2, 1e-3);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(std::abs(y[static_cast<std::size_t>(i)]) - 1e-3) < 1e-10);
    CHECK(y[0] < 0);
    CHECK(y[1] > 0);

    AdamMoments m3(2);
    std::vector<double> z{0.0, 0.0};
    const std::vector<double> scale{1.0, 0.01};
    adam_step(z, std::vector<double>{1.0, 1.0}, m3, 1.0, scale);
    CHECK(z[1] / z[0] == doctest::Approx(0.01));

    // Repeat runs are bit-identical.
    Gen g(73);
    std::vector<std::vector<double>> grads(50, std::vector<double>(4));
    for (auto& gr : grads)
        for (auto& v : gr) v = g.normal();
    auto run = [&] {
        std::vector<double> p(4, 0.5);
        AdamMoments mo(4);
        for (const auto& gr : grads) adam_step(p, gr, mo, 0.01);
        return p;
    };
    CHECK(run() == run());
}

TEST_CASE("joint mode from the ground truth stops almost immediately") {
    Fixture f(small_config(2));
    SolverConfig cfg = quick(SolverMode::joint, 500);
    const SolverResult r = optimize(f.problem, f.sim.gt.to_params(), cfg);
    CHECK(r.report.converged);
    CHECK(r.report.iterations <= 3);
    CHECK(r.report.l_recon < 1e-12);
    CHECK(r.params[0] == RigidParams{});
}

TEST_CASE("joint mode reduces GPE from perturbed poses") {
    Fixture f(small_config(3));
    SolverConfig cfg = quick(SolverMode::joint, 400);
    cfg.record_trajectory = true;
    const auto init = perturb_params(f.sim.gt.to_params(), 1.0, 0.5 * std::numbers::pi / 180, 9);
    const SolverResult r = optimize(f.problem, init, cfg);
    const FrameDims dims = f.sim.scan.dims;
    const auto before = evaluate(TransformSet::from_params(init), f.sim.gt, f.sim.scan.calib, dims, corner_pixels(dims), 1, 2);
    const auto after = evaluate(r.transforms, f.sim.gt, f.sim.scan.calib, dims, corner_pixels(dims), 1, 2);
    CHECK(after.gpe_mm < 0.5 * before.gpe_mm);
    for (const auto& step : r.rigid_trajectory) CHECK(step[0] == RigidParams{});
    for (const auto& rec : r.history) {
        CHECK(std::isfinite(rec.l_recon));
        CHECK(std::isfinite(rec.l_def));
        CHECK(std::isfinite(rec.l_ete));
    }
    CHECK(r.history.front().l_recon > r.history.back().l_recon);
}

TEST_CASE("alpha zero joint trajectory equals the sequential rigid stage") {
    Fixture f(small_config(4, 1.5));
    const auto init = perturb_params(f.sim.gt.to_params(), 1.0, 0.01, 5);
    SolverConfig j = quick(SolverMode::joint, 60);
    j.alpha = 0.0;
    j.tol = 0.0;
    j.record_trajectory = true;
    SolverConfig s = j;
    s.mode = SolverMode::sequential;
    const SolverResult rj = optimize(f.problem, init, j);
    const SolverResult rs = optimize(f.problem, init, s);
    REQUIRE(rj.rigid_trajectory.size() == static_cast<std::size_t>(rs.report.rigid_iterations));
    CHECK(rj.rigid_trajectory == rs.rigid_trajectory);
    CHECK(rj.params == rs.params);
}

TEST_CASE("sequential stages") {
    SUBCASE("no pose noise and no motion keeps the field near zero") {
        Fixture f(small_config(5));
        SolverConfig cfg = quick(SolverMode::sequential, 100);
        const SolverResult r = optimize(f.problem, f.sim.gt.to_params(), cfg);
        double worst = 0;
        for (const auto& v : r.ddf.vectors) worst = std::max(worst, v.norm());
        CHECK(worst < 0.05);
    }
    SUBCASE("rigid stage ignores the deformation settings") {
        Fixture f(small_config(6, 2.0));
        const auto init = perturb_params(f.sim.gt.to_params(), 0.5, 0.005, 6);
        SolverConfig a = quick(SolverMode::sequential, 80);
        SolverConfig b = a;
        b.control_grid_stride = 2;
        b.smooth_weight = 5.0;
        b.alpha = 3.0;
        const SolverResult ra = optimize(f.problem, init, a);
        const SolverResult rb = optimize(f.problem, init, b);
        CHECK(ra.params == rb.params);
        CHECK(ra.report.rigid_iterations == rb.report.rigid_iterations);
        for (int i = 0; i < ra.report.rigid_iterations; ++i) {
            CHECK(ra.history[static_cast<std::size_t>(i)].l_def == 0.0);
            CHECK(ra.history[static_cast<std::size_t>(i)].l_recon == rb.history[static_cast<std::size_t>(i)].l_recon);
        }
    }
}

TEST_CASE("runs are deterministic") {
    Fixture f(small_config(7, 1.0));
    const auto init = perturb_params(f.sim.gt.to_params(), 0.5, 0.005, 7);
    SolverConfig cfg = quick(SolverMode::joint, 30);
    cfg.check_gradients = true;
    const SolverResult a = optimize(f.problem, init, cfg);
    const SolverResult b = optimize(f.problem, init, cfg);
    CHECK(a.history == b.history);
    CHECK(a.params == b.params);
    CHECK(a.report.to_json(cfg).dump() == b.report.to_json(cfg).dump());
    CHECK(a.report.gradient_check.performed);
    CHECK(a.report.gradient_check.max_rel_err_recon < 1e-4);
}

TEST_CASE("finite-difference coupling moves the rigid parameters differently") {
    Fixture f(small_config(8, 2.0));
    const auto init = perturb_params(f.sim.gt.to_params(), 0.5, 0.005, 8);
    SolverConfig a = quick(SolverMode::joint, 5);
    a.alpha = 10.0;
    SolverConfig b = a;
    b.def_to_rigid_gradient = DefToRigid::finite_difference;
    const SolverResult ra = optimize(f.problem, init, a);
    const SolverResult rb = optimize(f.problem, init, b);
    CHECK(ra.params != rb.params);
    CHECK(rb.params[0] == RigidParams{});
}

TEST_CASE("divergence is reported") {
    Fixture f(small_config(9));
    const auto init = perturb_params(f.sim.gt.to_params(), 1.0, 0.01, 9);
    SolverConfig cfg = quick(SolverMode::joint, 200);
    cfg.learning_rate = 200.0;
    CHECK_THROWS_AS(optimize(f.problem, init, cfg), DivergenceError);
}

TEST_CASE("config validation and parsing") {
    SolverConfig c;
    CHECK(c.learning_rate == 1e-4);
    CHECK(c.alpha == 1e3);
    CHECK(c.control_grid_stride == 4);
    CHECK_NOTHROW(c.validate());
    c.learning_rate = 0;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c = {};
    c.max_iters = 0;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c = {};
    c.alpha = -1;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    CHECK(parse_solver_mode("sequential") == SolverMode::sequential);
    CHECK(parse_alpha_mode("adaptive") == AlphaMode::adaptive);
    CHECK(parse_def_to_rigid("finite_difference") == DefToRigid::finite_difference);
    CHECK_THROWS_AS(parse_solver_mode("both"), InvalidArgument);
}

TEST_CASE("loss history CSV") {
    const std::string csv = loss_history_csv({{1, 2.5, 0.5, 502.5, 1000.0}});
    CHECK(csv == "iteration,l_recon,l_def,l_ete,alpha\n1,2.5,0.5,502.5,1000\n");
}

TEST_CASE("problem validation") {
    Fixture f(small_config(10));
    auto init = f.sim.gt.to_params();
    init.pop_back();
    CHECK_THROWS_AS(optimize(f.problem, init, quick(SolverMode::joint, 5)), InvalidArgument);
}
