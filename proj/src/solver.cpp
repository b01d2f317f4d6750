#include "fusrecon/solver.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "fusrecon/error.hpp"
#include "fusrecon/objectives.hpp"

namespace fus {

std::string to_string(SolverMode m) { return m == SolverMode::joint ? "joint" : "sequential"; }
std::string to_string(AlphaMode m) { return m == AlphaMode::fixed ? "fixed" : "adaptive"; }
std::string to_string(DefToRigid m) { return m == DefToRigid::none ? "none" : "finite_difference"; }

SolverMode parse_solver_mode(const std::string& s) {
    if (s == "joint") return SolverMode::joint;
    if (s == "sequential") return SolverMode::sequential;
    throw InvalidArgument("unknown solver mode '" + s + "' (expected joint|sequential)");
}

AlphaMode parse_alpha_mode(const std::string& s) {
    if (s == "fixed") return AlphaMode::fixed;
    if (s == "adaptive") return AlphaMode::adaptive;
    throw InvalidArgument("unknown alpha mode '" + s + "' (expected fixed|adaptive)");
}

DefToRigid parse_def_to_rigid(const std::string& s) {
    if (s == "none") return DefToRigid::none;
    if (s == "finite_difference") return DefToRigid::finite_difference;
    throw InvalidArgument("unknown def_to_rigid_gradient '" + s + "' (expected none|finite_difference)");
}

void SolverConfig::validate() const {
    if (!(learning_rate > 0)) throw InvalidArgument("learning_rate must be > 0");
    if (!(rotation_lr_scale > 0)) throw InvalidArgument("rotation_lr_scale must be > 0");
    if (max_iters < 1) throw InvalidArgument("max_iters must be >= 1");
    if (!(alpha >= 0)) throw InvalidArgument("alpha must be >= 0");
    if (control_grid_stride < 1) throw InvalidArgument("control_grid_stride must be >= 1");
    if (!(fd_step_mm > 0)) throw InvalidArgument("fd_step_mm must be > 0");
    if (!(tol >= 0)) throw InvalidArgument("tol must be >= 0");
    if (recon_stride < 1 || volume_stride < 1) throw InvalidArgument("pixel strides must be >= 1");
    if (!(smooth_weight >= 0)) throw InvalidArgument("smooth_weight must be >= 0");
}

nlohmann::json SolverConfig::to_json() const {
    return {{"mode", to_string(mode)},
            {"learning_rate", learning_rate},
            {"rotation_lr_scale", rotation_lr_scale},
            {"max_iters", max_iters},
            {"alpha_mode", to_string(alpha_mode)},
            {"alpha", alpha},
            {"control_grid_stride", control_grid_stride},
            {"def_to_rigid_gradient", to_string(def_to_rigid_gradient)},
            {"fd_step_mm", fd_step_mm},
            {"tol", tol},
            {"seed", seed},
            {"recon_stride", recon_stride},
            {"volume_stride", volume_stride},
            {"smooth_weight", smooth_weight}};
}

nlohmann::json OptimReport::to_json(const SolverConfig& config) const {
    return {{"mode", to_string(mode)},
            {"iterations", iterations},
            {"rigid_iterations", rigid_iterations},
            {"deformation_iterations", deformation_iterations},
            {"converged", converged},
            {"final", {{"l_recon", l_recon}, {"l_def", l_def}, {"l_ete", l_ete}, {"alpha", alpha}}},
            {"dropped_samples", dropped_samples},
            {"gradient_check",
             {{"performed", gradient_check.performed},
              {"components", gradient_check.components},
              {"max_rel_err_recon", gradient_check.max_rel_err_recon},
              {"max_rel_err_def", gradient_check.max_rel_err_def}}},
            {"config", config.to_json()}};
}

RigidGradient grad_loss_recon(const std::vector<RigidParams>& params, const TransformSet& gt,
                              const Calibration& calib, FrameDims dims, int stride) {
    if (params.size() != gt.size()) throw InvalidArgument("grad_loss_recon: parameter/ground-truth length mismatch");
    const PointSet tool = transform_points(pixel_grid(dims, stride), calib.image_to_tool);
    const double scale = 1.0 / (static_cast<double>(gt.size()) * static_cast<double>(tool.size()));

    RigidGradient out;
    out.grad.assign(params.size(), {0, 0, 0, 0, 0, 0});
    double total = 0.0;
    for (std::size_t m = 1; m < params.size(); ++m) {
        const RigidParams& p = params[m];
        const Mat3 r = rotation_zyx(p.rx, p.ry, p.rz);
        const Vec3 t(p.tx, p.ty, p.tz);
        Vec3 sum_res = Vec3::Zero();
        Mat3 outer = Mat3::Zero();  // sum_n res_n q_n^T
        for (const auto& q : tool) {
            const Vec3 res = (r * q + t) - transform_point(gt[m], q);
            total += res.squaredNorm();
            sum_res += res;
            outer += res * q.transpose();
        }
        const auto dr = rotation_zyx_partials(p.rx, p.ry, p.rz);
        auto& g = out.grad[m];
        for (int a = 0; a < 3; ++a) g[static_cast<std::size_t>(a)] = 2.0 * scale * sum_res[a];
        for (int a = 0; a < 3; ++a) g[static_cast<std::size_t>(3 + a)] = 2.0 * scale * dr[a].cwiseProduct(outer).sum();
    }
    out.loss = total * scale;
    return out;
}

DeformationGradient grad_loss_def(const VolumeGrid& moving, const VolumeGrid& target, const ControlGrid& control,
                                  double smooth_weight) {
    const DisplacementField ddf = upsample_control(control, target.geometry);
    const WarpedSimilarity ws = warped_similarity(moving, target, ddf, true);
    DeformationGradient out;
    out.sim = ws.sim.mse;
    out.voxels = ws.sim.voxels;
    out.smooth = bending_energy(ddf);
    out.loss = out.sim + smooth_weight * out.smooth;

    std::vector<Vec3> dense = bending_energy_gradient(ddf);
    for (std::size_t i = 0; i < dense.size(); ++i) dense[i] = ws.grad[i] + smooth_weight * dense[i];
    out.grad = upsample_control_adjoint(control, target.dims(), dense);
    return out;
}

double adaptive_alpha(double grad_recon_norm, double grad_def_norm, double eps) {
    const double a = grad_recon_norm / (grad_def_norm + eps);
    if (!std::isfinite(a)) return 1e6;
    return std::clamp(a, 1.0, 1e6);
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamMoments& mo, double lr,
               std::span<const double> lr_scale) {
    if (grads.size() != params.size() || mo.m.size() != params.size() || mo.v.size() != params.size())
        throw InvalidArgument("adam_step: size mismatch");
    if (!lr_scale.empty() && lr_scale.size() != params.size())
        throw InvalidArgument("adam_step: lr_scale size mismatch");
    ++mo.t;
    const double c1 = 1.0 - std::pow(mo.beta1, mo.t);
    const double c2 = 1.0 - std::pow(mo.beta2, mo.t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        mo.m[i] = mo.beta1 * mo.m[i] + (1.0 - mo.beta1) * g;
        mo.v[i] = mo.beta2 * mo.v[i] + (1.0 - mo.beta2) * g * g;
        const double step = (mo.m[i] / c1) / (std::sqrt(mo.v[i] / c2) + mo.eps);
        params[i] -= (lr_scale.empty() ? lr : lr * lr_scale[i]) * step;
    }
}

namespace {

using Clock = std::chrono::steady_clock;

// Frames 1..M-1 flattened as (tx,ty,tz,rx,ry,rz) blocks.
std::vector<double> flatten(const std::vector<RigidParams>& p) {
    std::vector<double> x;
    x.reserve(6 * (p.size() - 1));
    for (std::size_t m = 1; m < p.size(); ++m)
        for (double v : p[m].to_array()) x.push_back(v);
    return x;
}

void unflatten(const std::vector<double>& x, std::vector<RigidParams>& p) {
    for (std::size_t m = 1; m < p.size(); ++m)
        for (int k = 0; k < 6; ++k) p[m][k] = x[6 * (m - 1) + static_cast<std::size_t>(k)];
}

std::vector<double> flatten(const RigidGradient& g) {
    std::vector<double> x;
    x.reserve(6 * (g.grad.size() - 1));
    for (std::size_t m = 1; m < g.grad.size(); ++m)
        for (double v : g.grad[m]) x.push_back(v);
    return x;
}

std::span<double> as_span(std::vector<Vec3>& v) { return {v.data()->data(), 3 * v.size()}; }

double norm(std::span<const double> x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return std::sqrt(s);
}

double norm(const std::vector<Vec3>& v) {
    double s = 0.0;
    for (const auto& x : v) s += x.squaredNorm();
    return std::sqrt(s);
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

void check_problem(const Problem& pr, const std::vector<RigidParams>& init) {
    if (!pr.scan) throw InvalidArgument("solver: problem has no scan");
    pr.scan->validate();
    if (pr.gt.size() != pr.scan->frame_count() || init.size() != pr.scan->frame_count())
        throw InvalidArgument("solver: need one ground-truth transform and one initial parameter vector per frame");
    pr.gt_vol.validate();
    for (const auto& p : init)
        if (!p.finite()) throw InvalidArgument("solver: non-finite initial parameters");
}

std::vector<double> rigid_lr_scale(std::size_t frames, double rot_scale) {
    std::vector<double> s;
    for (std::size_t m = 1; m < frames; ++m)
        for (int k = 0; k < 6; ++k) s.push_back(k < 3 ? 1.0 : rot_scale);
    return s;
}

VolumeGrid compound(const Problem& pr, const std::vector<RigidParams>& params, int stride, std::size_t* dropped) {
    return reconstruct_volume(*pr.scan, TransformSet::from_params(params), pr.gt_vol.geometry, stride, {}, dropped);
}

// Central differences of L_sim w.r.t. the rigid parameters, re-compounding
// the predicted volume for every perturbation.
std::vector<double> fd_def_rigid_gradient(const Problem& pr, const std::vector<RigidParams>& params,
                                          const DisplacementField& ddf, const SolverConfig& cfg) {
    std::vector<double> g;
    std::vector<RigidParams> p = params;
    for (std::size_t m = 1; m < p.size(); ++m) {
        for (int k = 0; k < 6; ++k) {
            const double h = k < 3 ? cfg.fd_step_mm : cfg.fd_step_mm * cfg.rotation_lr_scale;
            const double x0 = p[m][k];
            p[m][k] = x0 + h;
            const double fp = warped_similarity(compound(pr, p, cfg.volume_stride, nullptr), pr.gt_vol, ddf, false).sim.mse;
            p[m][k] = x0 - h;
            const double fm = warped_similarity(compound(pr, p, cfg.volume_stride, nullptr), pr.gt_vol, ddf, false).sim.mse;
            p[m][k] = x0;
            g.push_back((fp - fm) / (2 * h));
        }
    }
    return g;
}

GradientCheck check_gradients(const Problem& pr, const std::vector<RigidParams>& params, const ControlGrid& control,
                              const VolumeGrid& moving, const SolverConfig& cfg) {
    constexpr int kSamples = 6;
    GradientCheck gc;
    gc.performed = true;
    const ScanSequence& scan = *pr.scan;

    const RigidGradient rg = grad_loss_recon(params, pr.gt, scan.calib, scan.dims, cfg.recon_stride);
    std::vector<RigidParams> p = params;
    const std::size_t frames = p.size() - 1;
    for (int s = 0; s < kSamples; ++s) {
        const std::size_t m = 1 + static_cast<std::size_t>(s) * (frames - 1) / (kSamples - 1);
        const int k = s % 6;
        const double h = k < 3 ? 1e-4 : 1e-6;
        const double x0 = p[m][k];
        p[m][k] = x0 + h;
        const double fp = loss_recon(TransformSet::from_params(p), pr.gt, scan.calib, scan.dims, cfg.recon_stride);
        p[m][k] = x0 - h;
        const double fm = loss_recon(TransformSet::from_params(p), pr.gt, scan.calib, scan.dims, cfg.recon_stride);
        p[m][k] = x0;
        gc.max_rel_err_recon = std::max(gc.max_rel_err_recon, rel_err(rg.grad[m][static_cast<std::size_t>(k)], (fp - fm) / (2 * h)));
        ++gc.components;
    }

    const DeformationGradient dg = grad_loss_def(moving, pr.gt_vol, control, cfg.smooth_weight);
    ControlGrid c = control;
    for (int s = 0; s < kSamples; ++s) {
        const std::size_t idx = static_cast<std::size_t>(s) * (c.values.size() - 1) / (kSamples - 1);
        const int k = s % 3;
        const double h = 1e-3;
        const double x0 = c.values[idx][k];
        c.values[idx][k] = x0 + h;
        const double fp = grad_loss_def(moving, pr.gt_vol, c, cfg.smooth_weight).loss;
        c.values[idx][k] = x0 - h;
        const double fm = grad_loss_def(moving, pr.gt_vol, c, cfg.smooth_weight).loss;
        c.values[idx][k] = x0;
        gc.max_rel_err_def = std::max(gc.max_rel_err_def, rel_err(dg.grad[idx][k], (fp - fm) / (2 * h)));
        ++gc.components;
    }
    return gc;
}

class LossMonitor {
public:
    explicit LossMonitor(double tol) : tol_(tol) {}

    /// Returns true once the loss change falls under tolerance. Throws on
    /// non-finite values or growth past 1e3 x the initial loss.
    bool update(double loss, int iteration) {
        if (!std::isfinite(loss))
            throw DivergenceError("loss became non-finite at iteration " + std::to_string(iteration));
        if (!has_prev_) {
            initial_ = loss;
            prev_ = loss;
            has_prev_ = true;
            return false;
        }
        if (loss > 1e3 * std::max(initial_, 1e-6)) {
            std::ostringstream os;
            os << "loss diverged at iteration " << iteration << ": " << loss << " > 1e3 x initial " << initial_;
            throw DivergenceError(os.str());
        }
        const bool done = std::abs(loss - prev_) <= tol_ * std::max(std::abs(prev_), 1.0);
        prev_ = loss;
        return done;
    }

private:
    double tol_;
    double initial_ = 0, prev_ = 0;
    bool has_prev_ = false;
};

SolverResult start(const Problem& pr, const std::vector<RigidParams>& init, const SolverConfig& cfg) {
    cfg.validate();
    check_problem(pr, init);
    SolverResult res;
    res.params = init;
    res.params[0] = RigidParams{};
    res.control = ControlGrid::covering(pr.gt_vol.dims(), cfg.control_grid_stride);
    res.report.mode = cfg.mode;
    return res;
}

void finish(const Problem& pr, SolverResult& res, Clock::time_point t0) {
    res.transforms = TransformSet::from_params(res.params);
    res.ddf = upsample_control(res.control, pr.gt_vol.geometry);
    res.report.iterations = static_cast<int>(res.history.size());
    if (!res.history.empty()) {
        const auto& last = res.history.back();
        res.report.l_recon = last.l_recon;
        res.report.l_def = last.l_def;
        res.report.l_ete = last.l_ete;
        res.report.alpha = last.alpha;
    }
    res.report.wall_time_s = std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace

SolverResult optimize_joint(const Problem& pr, const std::vector<RigidParams>& init, const SolverConfig& cfg) {
    const auto t0 = Clock::now();
    SolverResult res = start(pr, init, cfg);
    const ScanSequence& scan = *pr.scan;

    std::vector<double> x = flatten(res.params);
    const std::vector<double> lr_scale = rigid_lr_scale(res.params.size(), cfg.rotation_lr_scale);
    AdamMoments rigid_m(x.size()), def_m(3 * res.control.values.size());
    LossMonitor monitor(cfg.tol);

    for (int it = 1; it <= cfg.max_iters; ++it) {
        const RigidGradient rg = grad_loss_recon(res.params, pr.gt, scan.calib, scan.dims, cfg.recon_stride);
        std::size_t dropped = 0;
        const VolumeGrid moving = compound(pr, res.params, cfg.volume_stride, &dropped);
        if (it == 1 && cfg.check_gradients)
            res.report.gradient_check = check_gradients(pr, res.params, res.control, moving, cfg);
        DeformationGradient dg = grad_loss_def(moving, pr.gt_vol, res.control, cfg.smooth_weight);

        std::vector<double> g_rigid = flatten(rg);
        const double alpha =
            cfg.alpha_mode == AlphaMode::fixed ? cfg.alpha : adaptive_alpha(norm(g_rigid), norm(dg.grad));
        const double l_ete = loss_ete(rg.loss, dg.loss, alpha);
        res.history.push_back({it, rg.loss, dg.loss, l_ete, alpha});
        if (cfg.record_trajectory) res.rigid_trajectory.push_back(res.params);
        res.report.dropped_samples = dropped;
        if (monitor.update(l_ete, it)) {
            res.report.converged = true;
            break;
        }
        if (it == cfg.max_iters) break;

        if (cfg.def_to_rigid_gradient == DefToRigid::finite_difference && alpha > 0) {
            const auto g_def = fd_def_rigid_gradient(pr, res.params, upsample_control(res.control, pr.gt_vol.geometry), cfg);
            for (std::size_t i = 0; i < g_rigid.size(); ++i) g_rigid[i] += alpha * g_def[i];
        }
        adam_step(x, g_rigid, rigid_m, cfg.learning_rate, lr_scale);
        unflatten(x, res.params);

        for (auto& v : dg.grad) v *= alpha;
        adam_step(as_span(res.control.values), as_span(dg.grad), def_m, cfg.learning_rate);
    }
    finish(pr, res, t0);
    return res;
}

SolverResult optimize_sequential(const Problem& pr, const std::vector<RigidParams>& init, const SolverConfig& cfg) {
    const auto t0 = Clock::now();
    SolverResult res = start(pr, init, cfg);
    const ScanSequence& scan = *pr.scan;

    // Rigid stage: L_recon only.
    std::vector<double> x = flatten(res.params);
    const std::vector<double> lr_scale = rigid_lr_scale(res.params.size(), cfg.rotation_lr_scale);
    AdamMoments rigid_m(x.size());
    LossMonitor rigid_monitor(cfg.tol);
    bool rigid_converged = false;
    double rigid_grad_norm = 0.0;
    double l_recon = 0.0;
    int it = 0;
    for (int k = 1; k <= cfg.max_iters; ++k) {
        ++it;
        const RigidGradient rg = grad_loss_recon(res.params, pr.gt, scan.calib, scan.dims, cfg.recon_stride);
        l_recon = rg.loss;
        // The deformation term is not evaluated in this stage.
        res.history.push_back({it, rg.loss, 0.0, rg.loss, 0.0});
        if (cfg.record_trajectory) res.rigid_trajectory.push_back(res.params);
        const std::vector<double> g = flatten(rg);
        rigid_grad_norm = norm(g);
        if (rigid_monitor.update(rg.loss, it)) {
            rigid_converged = true;
            break;
        }
        if (k == cfg.max_iters) break;
        adam_step(x, g, rigid_m, cfg.learning_rate, lr_scale);
        unflatten(x, res.params);
    }
    res.report.rigid_iterations = it;

    // Deformation stage: rigid parameters frozen.
    std::size_t dropped = 0;
    const VolumeGrid moving = compound(pr, res.params, cfg.volume_stride, &dropped);
    res.report.dropped_samples = dropped;
    if (cfg.check_gradients) res.report.gradient_check = check_gradients(pr, res.params, res.control, moving, cfg);
    AdamMoments def_m(3 * res.control.values.size());
    LossMonitor def_monitor(cfg.tol);
    bool def_converged = false;
    for (int k = 1; k <= cfg.max_iters; ++k) {
        ++it;
        DeformationGradient dg = grad_loss_def(moving, pr.gt_vol, res.control, cfg.smooth_weight);
        const double alpha =
            cfg.alpha_mode == AlphaMode::fixed ? cfg.alpha : adaptive_alpha(rigid_grad_norm, norm(dg.grad));
        res.history.push_back({it, l_recon, dg.loss, loss_ete(l_recon, dg.loss, alpha), alpha});
        ++res.report.deformation_iterations;
        if (def_monitor.update(dg.loss, it)) {
            def_converged = true;
            break;
        }
        if (k == cfg.max_iters) break;
        adam_step(as_span(res.control.values), as_span(dg.grad), def_m, cfg.learning_rate);
    }
    res.report.converged = rigid_converged && def_converged;
    finish(pr, res, t0);
    return res;
}

SolverResult optimize(const Problem& pr, const std::vector<RigidParams>& init, const SolverConfig& cfg) {
    return cfg.mode == SolverMode::joint ? optimize_joint(pr, init, cfg) : optimize_sequential(pr, init, cfg);
}

std::string loss_history_csv(const std::vector<LossRecord>& history) {
    std::ostringstream os;
    os.precision(17);
    os << "iteration,l_recon,l_def,l_ete,alpha\n";
    for (const auto& r : history)
        os << r.iteration << ',' << r.l_recon << ',' << r.l_def << ',' << r.l_ete << ',' << r.alpha << '\n';
    return os.str();
}

}  // namespace fus
