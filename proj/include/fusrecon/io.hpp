#pragma once

// File formats. All binary containers are little-endian with a 4-byte magic
// and a u32 format version.
//
//   FUSS  scan:     u32 M, u32 width, u32 height, f64 su, f64 sv, 16 f64 calibration (row-major),
//                   f64 fps, u64 seed, u32 landmark count,
//                   M*width*height f32 pixels, M*16 f64 poses (row-major), L*3 f64 landmarks
//   FUSV  volume:   u32 nx, ny, nz, 3 f64 origin, f64 spacing, N f32 values, N u8 mask
//   FUSD  field:    u32 nx, ny, nz, 3 f64 origin, f64 spacing, N*3 f32 (x,y,z interleaved)
//
// Text formats: transforms (one "tx ty tz rx ry rz" line per frame), loss CSV,
// metrics JSON, PGM P5 slices, and flat key=value run configs.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "fusrecon/compounding.hpp"
#include "fusrecon/deformation.hpp"
#include "fusrecon/phantom.hpp"
#include "fusrecon/scan.hpp"
#include "fusrecon/solver.hpp"

namespace fus {

inline constexpr std::uint32_t kFormatVersion = 1;

std::string encode_scan(const ScanSequence& scan);
ScanSequence decode_scan(std::string_view bytes);

std::string encode_volume(const VolumeGrid& vol);
VolumeGrid decode_volume(std::string_view bytes);

/// Vectors are narrowed to f32 on encode.
std::string encode_ddf(const DisplacementField& ddf);
DisplacementField decode_ddf(std::string_view bytes);

/// Throws IoError when the file cannot be read.
std::string read_file(const std::filesystem::path& path);
/// Writes to a sibling temporary and renames, so a failed write leaves no
/// partial output. Throws IoError.
void write_file(const std::filesystem::path& path, std::string_view bytes);

ScanSequence read_scan(const std::filesystem::path& path);
void write_scan(const std::filesystem::path& path, const ScanSequence& scan);
VolumeGrid read_volume(const std::filesystem::path& path);
void write_volume(const std::filesystem::path& path, const VolumeGrid& vol);
DisplacementField read_ddf(const std::filesystem::path& path);
void write_ddf(const std::filesystem::path& path, const DisplacementField& ddf);

std::string format_transforms(const std::vector<RigidParams>& params);
std::vector<RigidParams> parse_transforms(std::string_view text);

/// 8-bit P5 image of slice `index` normal to `axis` (0=x, 1=y, 2=z).
/// Values are clamped to [0,1] and scaled by 255; masked-off voxels are 0.
std::string pgm_slice(const VolumeGrid& vol, int axis, int index);

/// Flat key=value document. '#' starts a comment; blank lines are ignored.
struct RunConfig {
    SimulationConfig simulation;
    SolverConfig solver;
    double volume_spacing_mm = 1.0;
    int reconstruct_stride = 1;
    double perturb_trans_mm = 1.0;
    double perturb_rot_deg = 0.5;
    std::uint64_t perturb_seed = 0;
    int eval_interval = 1;
    int eval_stride = 4;

    RunConfig();

    /// Throws InvalidArgument for unknown keys or unparsable values.
    void set(const std::string& key, const std::string& value);
    static RunConfig parse(std::string_view text);
    void validate() const;

    /// Every accepted key with its current value, in documentation order.
    std::vector<std::pair<std::string, std::string>> entries() const;
    std::string to_text() const;
};

}  // namespace fus
