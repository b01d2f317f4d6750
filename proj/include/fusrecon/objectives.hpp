#pragma once

// Training losses and reconstruction-error metrics.
//
// Global displacement of a point is where the frame's transform into the
// reference frame moves it; local displacement uses the transform into the
// immediately preceding (evaluated) frame instead. Pixel errors average over
// every pixel of every non-reference frame, landmark errors over the supplied
// landmark pixels (by default the four frame corners).

#include <string>
#include <vector>

#include <json.hpp>

#include "fusrecon/deformation.hpp"
#include "fusrecon/scan.hpp"

namespace fus {

struct MetricsReport {
    double gpe_mm = 0, gle_mm = 0, lpe_mm = 0, lle_mm = 0;

    std::vector<std::size_t> frames;  // evaluated (non-reference) frame indices
    std::vector<double> gpe, gle, lpe, lle;

    int stride = 1;
    int interval = 1;

    nlohmann::json to_json() const;
    static MetricsReport from_json(const nlohmann::json& j);
};

/// (1/M)(1/N) sum_m sum_n |P_mn - P^_mn|^2 over every `stride`-th pixel, mm^2.
double loss_recon(const TransformSet& pred, const TransformSet& gt, const Calibration& calib, FrameDims dims,
                  int stride = 4);

/// similarity(warped, gt_vol) + smooth_weight * bending_energy(ddf).
double loss_def(const VolumeGrid& warped, const VolumeGrid& gt_vol, const DisplacementField& ddf,
                double smooth_weight = 1.0);

double loss_ete(double l_recon, double l_def, double alpha);

/// One displacement set per non-reference frame (frames 1..M-1); `points`
/// are frame-local calibrated (tool) coordinates shared by every frame.
std::vector<PointSet> global_displacements(const TransformSet& ts, const PointSet& points);
std::vector<PointSet> local_displacements(const TransformSet& ts, const PointSet& points);

/// Frames 0, interval, 2*interval, ... keeping frame 0 as reference.
TransformSet common_frames(const TransformSet& ts, int interval);

/// GPE/GLE/LPE/LLE of `pred` against `gt`. `landmark_pixels` are image
/// pixel coordinates (u, v, 0); pass corner_pixels(dims) for the default.
/// `interval` > 1 evaluates on the common-frame subsample only.
MetricsReport evaluate(const TransformSet& pred, const TransformSet& gt, const Calibration& calib, FrameDims dims,
                       const PointSet& landmark_pixels, int interval = 1, int stride = 1);

/// Mean Euclidean distance between corresponding points.
double landmark_distance(const PointSet& a, const PointSet& b);

}  // namespace fus
