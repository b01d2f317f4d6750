// fusrecon command-line interface.
//
// Exit codes: 0 success, 1 validation / format error, 2 I/O error,
// 3 numerical divergence.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fusrecon/compounding.hpp"
#include "fusrecon/error.hpp"
#include "fusrecon/io.hpp"
#include "fusrecon/objectives.hpp"
#include "fusrecon/phantom.hpp"
#include "fusrecon/solver.hpp"

namespace fs = std::filesystem;
using namespace fus;

namespace {

enum Exit { kOk = 0, kValidation = 1, kIo = 2, kDivergence = 3 };

struct ConfigArgs {
    std::string path;
    std::vector<std::string> sets;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--config", path, "key=value run config file");
        cmd->add_option("--set", sets, "override one config key (key=value), repeatable");
    }

    RunConfig load() const {
        RunConfig c = path.empty() ? RunConfig{} : RunConfig::parse(read_file(path));
        for (const auto& kv : sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw InvalidArgument("--set expects key=value, got '" + kv + "'");
            c.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        c.validate();
        return c;
    }
};

TransformSet load_poses(const std::string& source, const ScanSequence& scan) {
    if (source == "ground_truth") return scan.ground_truth();
    const auto params = parse_transforms(read_file(source));
    if (params.size() != scan.frame_count())
        throw InvalidArgument("transform file has " + std::to_string(params.size()) + " frames, scan has " +
                              std::to_string(scan.frame_count()));
    return TransformSet::from_params(params);
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir.string() + "'");
}

std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

// --- simulate ---------------------------------------------------------------

struct SimulateCmd {
    ConfigArgs config;
    std::string out;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("simulate", "render a synthetic tracked sweep");
        config.add_to(cmd);
        cmd->add_option("--out", out, "output scan container (.fuss)")->required();
        cmd->callback([this] { run(); });
    }

    void run() const {
        const RunConfig c = config.load();
        const SimulatedScan sim = simulate_scan(c.simulation);
        write_scan(out, sim.scan);
        std::cout << "M=" << sim.scan.frame_count() << " dims=" << sim.scan.dims.width << "x" << sim.scan.dims.height
                  << " shape=" << to_string(c.simulation.trajectory.shape) << " landmarks=" << sim.landmarks.size()
                  << " -> " << out << "\n";
    }
};

// --- reconstruct ------------------------------------------------------------

struct ReconstructCmd {
    std::string scan_path, poses = "ground_truth", out;
    double spacing = 1.0;
    int stride = 1;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("reconstruct", "compound a scan into a voxel volume");
        cmd->add_option("--scan", scan_path, "scan container")->required();
        cmd->add_option("--poses", poses, "ground_truth or a transforms text file");
        cmd->add_option("--spacing", spacing, "voxel spacing, mm");
        cmd->add_option("--stride", stride, "pixel stride");
        cmd->add_option("--out", out, "output volume (.fusv)")->required();
        cmd->callback([this] { run(); });
    }

    void run() const {
        if (!(spacing > 0)) throw InvalidArgument("--spacing must be positive");
        if (stride < 1) throw InvalidArgument("--stride must be >= 1");
        const ScanSequence scan = read_scan(scan_path);
        const TransformSet ts = load_poses(poses, scan);
        std::size_t dropped = 0;
        const GridGeometry grid = scan_bounds(scan, ts, spacing);
        const VolumeGrid vol = reconstruct_volume(scan, ts, grid, stride, {}, &dropped);
        write_volume(out, vol);
        const auto& d = vol.dims();
        std::cout << "volume " << d.nx << "x" << d.ny << "x" << d.nz << " spacing " << spacing << " mm -> " << out
                  << "\n";
    }
};

// --- cooptimize -------------------------------------------------------------

struct CooptimizeCmd {
    ConfigArgs config;
    std::string scan_path, init = "ground_truth", mode, out_dir, gt_volume;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("cooptimize", "jointly or sequentially refine poses and a displacement field");
        config.add_to(cmd);
        cmd->add_option("--scan", scan_path, "scan container")->required();
        cmd->add_option("--init", init, "ground_truth, perturbed, or a transforms text file");
        cmd->add_option("--mode", mode, "joint or sequential (overrides config)");
        cmd->add_option("--gt-volume", gt_volume, "reference volume (default: scan compounded with ground truth)");
        cmd->add_option("--out-dir", out_dir, "output directory")->required();
        cmd->callback([this] { run(); });
    }

    void run() const {
        RunConfig c = config.load();
        if (!mode.empty()) c.solver.mode = parse_solver_mode(mode);
        const ScanSequence scan = read_scan(scan_path);

        Problem pr;
        pr.scan = &scan;
        pr.gt = scan.ground_truth();
        pr.gt_vol = gt_volume.empty()
                        ? reconstruct_volume(scan, pr.gt, scan_bounds(scan, pr.gt, c.volume_spacing_mm),
                                             c.solver.volume_stride)
                        : read_volume(gt_volume);

        std::vector<RigidParams> start;
        if (init == "perturbed")
            start = perturb_params(pr.gt.to_params(), c.perturb_trans_mm, c.perturb_rot_deg * std::numbers::pi / 180.0,
                                   c.perturb_seed);
        else
            start = load_poses(init, scan).to_params();

        const SolverResult res = optimize(pr, start, c.solver);

        ensure_dir(out_dir);
        const fs::path dir(out_dir);
        nlohmann::json report = res.report.to_json(c.solver);
        report["init"] = init;
        write_file(dir / "transforms.txt", format_transforms(res.params));
        write_ddf(dir / "ddf.fusd", res.ddf);
        write_file(dir / "report.json", dump(report));
        write_file(dir / "loss.csv", loss_history_csv(res.history));
        std::printf("%s: %d iterations, L_recon %.6g, L_def %.6g, converged %s (%.1f s) -> %s\n",
                    to_string(c.solver.mode).c_str(), res.report.iterations, res.report.l_recon, res.report.l_def,
                    res.report.converged ? "yes" : "no", res.report.wall_time_s, out_dir.c_str());
    }
};

// --- evaluate ---------------------------------------------------------------

struct EvaluateCmd {
    std::string scan_path, pred, out;
    int interval = 1, stride = 4;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("evaluate", "GPE/GLE/LPE/LLE of predicted transforms");
        cmd->add_option("--scan", scan_path, "scan container with ground-truth poses")->required();
        cmd->add_option("--pred", pred, "predicted transforms text file")->required();
        cmd->add_option("--interval", interval, "common-frame interval");
        cmd->add_option("--stride", stride, "pixel stride for the pixel errors");
        cmd->add_option("--out", out, "metrics JSON")->required();
        cmd->callback([this] { run(); });
    }

    void run() const {
        const ScanSequence scan = read_scan(scan_path);
        const TransformSet p = load_poses(pred, scan);
        const MetricsReport r = evaluate(p, scan.ground_truth(), scan.calib, scan.dims, corner_pixels(scan.dims), interval, stride);
        write_file(out, dump(r.to_json()));
        std::printf("GPE %.4f GLE %.4f LPE %.4f LLE %.4f mm (%zu frames) -> %s\n", r.gpe_mm, r.gle_mm, r.lpe_mm,
                    r.lle_mm, r.frames.size(), out.c_str());
    }
};

// --- export-slices ----------------------------------------------------------

struct ExportSlicesCmd {
    std::string volume, axis = "z", out_dir;
    std::vector<int> indices;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("export-slices", "write volume slices as 8-bit PGM images");
        cmd->add_option("--volume", volume, "volume container (.fusv)")->required();
        cmd->add_option("--axis", axis, "x, y or z");
        cmd->add_option("--indices", indices, "slice indices")->required()->delimiter(',');
        cmd->add_option("--out-dir", out_dir, "output directory")->required();
        cmd->callback([this] { run(); });
    }

    void run() const {
        const int a = axis == "x" ? 0 : axis == "y" ? 1 : axis == "z" ? 2 : -1;
        if (a < 0) throw InvalidArgument("--axis must be x, y or z");
        const VolumeGrid vol = read_volume(volume);
        std::vector<std::string> images;
        for (int i : indices) images.push_back(pgm_slice(vol, a, i));  // validate all before writing
        ensure_dir(out_dir);
        for (std::size_t k = 0; k < indices.size(); ++k) {
            const fs::path p = fs::path(out_dir) / ("slice_" + axis + "_" + std::to_string(indices[k]) + ".pgm");
            write_file(p, images[k]);
            std::cout << p.string() << "\n";
        }
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Freehand ultrasound reconstruction and pose/deformation co-optimisation"};
    app.require_subcommand(1);
    SimulateCmd simulate;
    ReconstructCmd reconstruct;
    CooptimizeCmd cooptimize;
    EvaluateCmd evaluate_cmd;
    ExportSlicesCmd export_slices;
    simulate.add(app);
    reconstruct.add(app);
    cooptimize.add(app);
    evaluate_cmd.add(app);
    export_slices.add(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kValidation;
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kDivergence;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kIo;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    }
    return kOk;
}
