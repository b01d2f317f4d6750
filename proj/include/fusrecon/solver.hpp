#pragma once

// Co-optimisation of per-frame rigid parameters and a displacement field.
//
// Variables are the per-frame 6-vectors of frames 1..M-1 (frame 0 is pinned
// to the identity) and the values of a coarse control grid that is upsampled
// to the dense field. Two schedules are provided:
//
//   joint       minimise L_recon + alpha * L_def over both variable sets at once,
//               re-compounding the predicted volume every iteration;
//   sequential  minimise L_recon over the rigid parameters, then L_def over the
//               control grid with the rigid result frozen.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusrecon/compounding.hpp"
#include "fusrecon/deformation.hpp"
#include "fusrecon/scan.hpp"

namespace fus {

enum class SolverMode : std::uint8_t { joint, sequential };
enum class AlphaMode : std::uint8_t { fixed, adaptive };
enum class DefToRigid : std::uint8_t { none, finite_difference };

std::string to_string(SolverMode m);
std::string to_string(AlphaMode m);
std::string to_string(DefToRigid m);
SolverMode parse_solver_mode(const std::string& s);
AlphaMode parse_alpha_mode(const std::string& s);
DefToRigid parse_def_to_rigid(const std::string& s);

struct SolverConfig {
    SolverMode mode = SolverMode::joint;
    double learning_rate = 1e-4;       // mm for translations and displacements
    double rotation_lr_scale = 1e-2;   // rotation step = learning_rate * scale (rad)
    int max_iters = 2000;              // per stage in sequential mode
    AlphaMode alpha_mode = AlphaMode::fixed;
    double alpha = 1e3;
    int control_grid_stride = 4;       // 1 = optimise the full-resolution field
    DefToRigid def_to_rigid_gradient = DefToRigid::none;
    double fd_step_mm = 1e-2;          // rigid finite-difference step (rotations: * rotation_lr_scale)
    double tol = 1e-9;                 // relative change of the monitored loss
    std::uint64_t seed = 0;
    int recon_stride = 4;              // pixel stride inside L_recon
    int volume_stride = 2;             // pixel stride when re-compounding
    double smooth_weight = 1.0;
    bool check_gradients = true;
    bool record_trajectory = false;

    void validate() const;
    nlohmann::json to_json() const;
};

struct LossRecord {
    int iteration = 0;
    double l_recon = 0, l_def = 0, l_ete = 0, alpha = 0;
    friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

struct GradientCheck {
    bool performed = false;
    double max_rel_err_recon = 0;
    double max_rel_err_def = 0;
    int components = 0;
    friend bool operator==(const GradientCheck&, const GradientCheck&) = default;
};

struct OptimReport {
    SolverMode mode = SolverMode::joint;
    double l_recon = 0, l_def = 0, l_ete = 0, alpha = 0;
    int iterations = 0;           // total recorded iterations
    int rigid_iterations = 0;     // sequential only
    int deformation_iterations = 0;
    bool converged = false;
    std::size_t dropped_samples = 0;
    GradientCheck gradient_check;
    double wall_time_s = 0;       // not serialised; runs must stay byte-reproducible

    nlohmann::json to_json(const SolverConfig& config) const;
};

struct SolverResult {
    std::vector<RigidParams> params;
    TransformSet transforms;
    ControlGrid control;
    DisplacementField ddf;
    OptimReport report;
    std::vector<LossRecord> history;
    std::vector<std::vector<RigidParams>> rigid_trajectory;  // filled when record_trajectory
};

/// Everything the objectives need that stays fixed across iterations.
struct Problem {
    const ScanSequence* scan = nullptr;
    TransformSet gt;
    VolumeGrid gt_vol;
};

struct RigidGradient {
    double loss = 0;
    std::vector<std::array<double, 6>> grad;  // per frame; frame 0 always zero
};

/// L_recon and its analytic gradient w.r.t. every frame's parameters.
RigidGradient grad_loss_recon(const std::vector<RigidParams>& params, const TransformSet& gt,
                              const Calibration& calib, FrameDims dims, int stride);

struct DeformationGradient {
    double loss = 0;           // L_sim + smooth_weight * L_smooth
    double sim = 0, smooth = 0;
    std::size_t voxels = 0;    // 0 => empty joint mask, similarity gradient is zero
    std::vector<Vec3> grad;    // per control point
};

/// L_def of warp(moving, upsample(control)) against `target` with its gradient
/// w.r.t. the control values (warp chain rule + bending stencil adjoint).
DeformationGradient grad_loss_def(const VolumeGrid& moving, const VolumeGrid& target, const ControlGrid& control,
                                  double smooth_weight = 1.0);

/// grad_recon_norm / (grad_def_norm + eps), clamped to [1, 1e6].
double adaptive_alpha(double grad_recon_norm, double grad_def_norm, double eps = 1e-12);

struct AdamMoments {
    std::vector<double> m, v;
    int t = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    explicit AdamMoments(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam update. `lr_scale`, when non-empty, multiplies the
/// step size per parameter.
void adam_step(std::span<double> params, std::span<const double> grads, AdamMoments& moments, double lr,
               std::span<const double> lr_scale = {});

SolverResult optimize_joint(const Problem& problem, const std::vector<RigidParams>& init, const SolverConfig& config);
SolverResult optimize_sequential(const Problem& problem, const std::vector<RigidParams>& init,
                                 const SolverConfig& config);
SolverResult optimize(const Problem& problem, const std::vector<RigidParams>& init, const SolverConfig& config);

std::string loss_history_csv(const std::vector<LossRecord>& history);

}  // namespace fus
