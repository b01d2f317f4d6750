#include "fusrecon/objectives.hpp"

#include <cmath>

#include "fusrecon/error.hpp"

namespace fus {

namespace {

void require_pair(const TransformSet& pred, const TransformSet& gt, const char* what) {
    if (pred.size() != gt.size())
        throw InvalidArgument(std::string(what) + ": predicted and ground-truth sets differ in length (" +
                              std::to_string(pred.size()) + " vs " + std::to_string(gt.size()) + ")");
    pred.validate(false);
    gt.validate(false);
}

double mean_distance(const PointSet& a, const PointSet& b) {
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) sum += (a[i] - b[i]).norm();
    return a.empty() ? 0.0 : sum / static_cast<double>(a.size());
}

PointSet displacement(const RigidMatrix& t, const PointSet& points) {
    PointSet out;
    out.reserve(points.size());
    for (const auto& p : points) out.push_back(transform_point(t, p) - p);
    return out;
}

}  // namespace

double loss_recon(const TransformSet& pred, const TransformSet& gt, const Calibration& calib, FrameDims dims,
                  int stride) {
    require_pair(pred, gt, "loss_recon");
    const PointSet tool = transform_points(pixel_grid(dims, stride), calib.image_to_tool);
    double total = 0.0;
    for (std::size_t m = 0; m < gt.size(); ++m) {
        if (pred[m] == gt[m]) continue;
        double frame_sum = 0.0;
        for (const auto& q : tool) frame_sum += (transform_point(gt[m], q) - transform_point(pred[m], q)).squaredNorm();
        total += frame_sum;
    }
    return total / (static_cast<double>(gt.size()) * static_cast<double>(tool.size()));
}

double loss_def(const VolumeGrid& warped, const VolumeGrid& gt_vol, const DisplacementField& ddf, double smooth_weight) {
    return similarity(warped, gt_vol).mse + smooth_weight * bending_energy(ddf);
}

double loss_ete(double l_recon, double l_def, double alpha) {
    if (!(alpha >= 0)) throw InvalidArgument("loss_ete: alpha must be non-negative");
    return l_recon + alpha * l_def;
}

std::vector<PointSet> global_displacements(const TransformSet& ts, const PointSet& points) {
    std::vector<PointSet> out;
    for (std::size_t m = 1; m < ts.size(); ++m) out.push_back(displacement(ts[m], points));
    return out;
}

std::vector<PointSet> local_displacements(const TransformSet& ts, const PointSet& points) {
    std::vector<PointSet> out;
    for (std::size_t m = 1; m < ts.size(); ++m)
        out.push_back(displacement(relative_transform(ts[m - 1], ts[m]), points));
    return out;
}

TransformSet common_frames(const TransformSet& ts, int interval) {
    if (interval < 1) throw InvalidArgument("common-frame interval must be >= 1");
    TransformSet sub;
    sub.source = ts.source;
    for (std::size_t m = 0; m < ts.size(); m += static_cast<std::size_t>(interval)) sub.transforms.push_back(ts[m]);
    return sub;
}

MetricsReport evaluate(const TransformSet& pred, const TransformSet& gt, const Calibration& calib, FrameDims dims,
                       const PointSet& landmark_pixels, int interval, int stride) {
    require_pair(pred, gt, "evaluate");
    const TransformSet p = common_frames(pred, interval);
    const TransformSet g = common_frames(gt, interval);
    if (p.size() < 2) throw InvalidArgument("evaluate: interval leaves no frame besides the reference");

    const PointSet pix = transform_points(pixel_grid(dims, stride), calib.image_to_tool);
    const PointSet marks = transform_points(landmark_pixels, calib.image_to_tool);

    const auto gp = global_displacements(g, pix), pp = global_displacements(p, pix);
    const auto gl = global_displacements(g, marks), pl = global_displacements(p, marks);
    const auto lgp = local_displacements(g, pix), lpp = local_displacements(p, pix);
    const auto lgl = local_displacements(g, marks), lpl = local_displacements(p, marks);

    MetricsReport r;
    r.stride = stride;
    r.interval = interval;
    const std::size_t frames = p.size() - 1;
    for (std::size_t k = 0; k < frames; ++k) {
        r.frames.push_back((k + 1) * static_cast<std::size_t>(interval));
        r.gpe.push_back(mean_distance(gp[k], pp[k]));
        r.gle.push_back(mean_distance(gl[k], pl[k]));
        r.lpe.push_back(mean_distance(lgp[k], lpp[k]));
        r.lle.push_back(mean_distance(lgl[k], lpl[k]));
    }
    // Every frame contributes the same number of points, so the mean of the
    // per-frame means is the mean over all points.
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    r.gpe_mm = mean(r.gpe);
    r.gle_mm = landmark_pixels.empty() ? 0.0 : mean(r.gle);
    r.lpe_mm = mean(r.lpe);
    r.lle_mm = landmark_pixels.empty() ? 0.0 : mean(r.lle);
    return r;
}

double landmark_distance(const PointSet& a, const PointSet& b) {
    if (a.size() != b.size())
        throw InvalidArgument("landmark_distance: point counts differ (" + std::to_string(a.size()) + " vs " +
                              std::to_string(b.size()) + ")");
    return mean_distance(a, b);
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json j;
    j["gpe_mm"] = gpe_mm;
    j["gle_mm"] = gle_mm;
    j["lpe_mm"] = lpe_mm;
    j["lle_mm"] = lle_mm;
    j["per_frame"] = {{"frame", frames}, {"gpe_mm", gpe}, {"gle_mm", gle}, {"lpe_mm", lpe}, {"lle_mm", lle}};
    j["config"] = {{"stride", stride}, {"interval", interval}};
    return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.gpe_mm = j.at("gpe_mm").get<double>();
    r.gle_mm = j.at("gle_mm").get<double>();
    r.lpe_mm = j.at("lpe_mm").get<double>();
    r.lle_mm = j.at("lle_mm").get<double>();
    const auto& pf = j.at("per_frame");
    r.frames = pf.at("frame").get<std::vector<std::size_t>>();
    r.gpe = pf.at("gpe_mm").get<std::vector<double>>();
    r.gle = pf.at("gle_mm").get<std::vector<double>>();
    r.lpe = pf.at("lpe_mm").get<std::vector<double>>();
    r.lle = pf.at("lle_mm").get<std::vector<double>>();
    r.stride = j.at("config").at("stride").get<int>();
    r.interval = j.at("config").at("interval").get<int>();
    return r;
}

}  // namespace fus
