#include "fusrecon/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>

#include "fusrecon/error.hpp"

namespace fus {

namespace {

class ByteWriter {
public:
    void bytes(std::string_view s) { buf_.append(s); }
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) { le(v); }
    void u64(std::uint64_t v) { le(v); }
    void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
    std::string take() { return std::move(buf_); }

private:
    template <class T>
    void le(T v) {
        for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    }
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string_view data) : data_(data) {}

    std::size_t remaining() const { return data_.size() - pos_; }

    void require(std::size_t n, const std::string& field) const {
        if (remaining() < n)
            throw FormatError(field, "truncated (need " + std::to_string(n) + " bytes, have " +
                                         std::to_string(remaining()) + ")");
    }
    std::string_view bytes(std::size_t n, const std::string& field) {
        require(n, field);
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint8_t u8(const std::string& field) { return static_cast<std::uint8_t>(bytes(1, field)[0]); }
    std::uint32_t u32(const std::string& field) { return le<std::uint32_t>(field); }
    std::uint64_t u64(const std::string& field) { return le<std::uint64_t>(field); }
    float f32(const std::string& field) { return std::bit_cast<float>(le<std::uint32_t>(field)); }
    double f64(const std::string& field) { return std::bit_cast<double>(le<std::uint64_t>(field)); }

    void finish() const {
        if (remaining() != 0) throw FormatError("payload", std::to_string(remaining()) + " trailing bytes");
    }

private:
    template <class T>
    T le(const std::string& field) {
        auto s = bytes(sizeof(T), field);
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<unsigned char>(s[i])) << (8 * i);
        return v;
    }
    std::string_view data_;
    std::size_t pos_ = 0;
};

void read_header(ByteReader& r, std::string_view magic) {
    if (r.bytes(4, "magic") != magic) throw FormatError("magic", "expected \"" + std::string(magic) + "\"");
    const auto version = r.u32("version");
    if (version != kFormatVersion)
        throw FormatError("version", "unsupported format version " + std::to_string(version));
}

double finite_f64(ByteReader& r, const std::string& field) {
    const double v = r.f64(field);
    if (!std::isfinite(v)) throw FormatError(field, "not finite");
    return v;
}

Mat4 read_mat4(ByteReader& r, const std::string& field) {
    Mat4 m;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) m(i, j) = finite_f64(r, field);
    return m;
}

void write_mat4(ByteWriter& w, const Mat4& m) {
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) w.f64(m(i, j));
}

// Payload size check before allocating, so a corrupted count cannot trigger
// a huge allocation.
void require_payload(const ByteReader& r, std::uint64_t count, std::uint64_t elem_size, const std::string& field) {
    if (elem_size != 0 && count > r.remaining() / elem_size)
        throw FormatError(field, "count " + std::to_string(count) + " exceeds payload size");
}

void write_grid_header(ByteWriter& w, std::string_view magic, const GridGeometry& g) {
    w.bytes(magic);
    w.u32(kFormatVersion);
    w.u32(static_cast<std::uint32_t>(g.dims.nx));
    w.u32(static_cast<std::uint32_t>(g.dims.ny));
    w.u32(static_cast<std::uint32_t>(g.dims.nz));
    for (int a = 0; a < 3; ++a) w.f64(g.origin[a]);
    w.f64(g.spacing);
}

GridGeometry read_grid_header(ByteReader& r, std::string_view magic) {
    read_header(r, magic);
    GridGeometry g;
    const char* names[3] = {"nx", "ny", "nz"};
    std::uint32_t d[3];
    for (int a = 0; a < 3; ++a) {
        d[a] = r.u32(names[a]);
        if (d[a] == 0 || d[a] > (1u << 20)) throw FormatError(names[a], "dimension out of range");
    }
    g.dims = {static_cast<int>(d[0]), static_cast<int>(d[1]), static_cast<int>(d[2])};
    for (int a = 0; a < 3; ++a) g.origin[a] = finite_f64(r, "origin");
    g.spacing = finite_f64(r, "spacing");
    if (!(g.spacing > 0)) throw FormatError("spacing", "must be positive");
    return g;
}

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(std::string_view s, const std::string& what) {
    double v = 0;
    const auto* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || p != end || !std::isfinite(v))
        throw InvalidArgument(what + ": cannot parse number '" + std::string(s) + "'");
    return v;
}

template <class Int>
Int parse_int(std::string_view s, const std::string& what) {
    Int v = 0;
    const auto* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || p != end) throw InvalidArgument(what + ": cannot parse integer '" + std::string(s) + "'");
    return v;
}

bool parse_bool(std::string_view s, const std::string& what) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw InvalidArgument(what + ": expected true|false, got '" + std::string(s) + "'");
}

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::string encode_scan(const ScanSequence& scan) {
    scan.validate();
    ByteWriter w;
    w.bytes("FUSS");
    w.u32(kFormatVersion);
    w.u32(static_cast<std::uint32_t>(scan.frame_count()));
    w.u32(static_cast<std::uint32_t>(scan.dims.width));
    w.u32(static_cast<std::uint32_t>(scan.dims.height));
    w.f64(scan.calib.spacing_u);
    w.f64(scan.calib.spacing_v);
    write_mat4(w, scan.calib.image_to_tool);
    w.f64(scan.fps);
    w.u64(scan.seed);
    w.u32(static_cast<std::uint32_t>(scan.landmarks.size()));
    for (float v : scan.pixels) w.f32(v);
    for (const auto& p : scan.poses) write_mat4(w, p);
    for (const auto& l : scan.landmarks)
        for (int a = 0; a < 3; ++a) w.f64(l[a]);
    return w.take();
}

ScanSequence decode_scan(std::string_view bytes) {
    ByteReader r(bytes);
    read_header(r, "FUSS");
    ScanSequence s;
    const auto frames = r.u32("frame_count");
    if (frames < 2) throw FormatError("frame_count", "need at least 2 frames, got " + std::to_string(frames));
    const auto width = r.u32("width");
    const auto height = r.u32("height");
    if (width == 0 || width > (1u << 16)) throw FormatError("width", "out of range");
    if (height == 0 || height > (1u << 16)) throw FormatError("height", "out of range");
    s.dims = {static_cast<int>(width), static_cast<int>(height)};
    s.calib.spacing_u = finite_f64(r, "spacing_u");
    s.calib.spacing_v = finite_f64(r, "spacing_v");
    if (!(s.calib.spacing_u > 0)) throw FormatError("spacing_u", "must be positive");
    if (!(s.calib.spacing_v > 0)) throw FormatError("spacing_v", "must be positive");
    s.calib.image_to_tool = read_mat4(r, "calibration");
    try {
        s.calib.validate();
    } catch (const InvalidArgument& e) {
        throw FormatError("calibration", e.what());
    }
    s.fps = finite_f64(r, "fps");
    if (!(s.fps > 0)) throw FormatError("fps", "must be positive");
    s.seed = r.u64("seed");
    const auto landmarks = r.u32("landmark_count");

    const std::uint64_t n_pix = static_cast<std::uint64_t>(frames) * width * height;
    require_payload(r, n_pix, 4, "frame_count");
    s.pixels.resize(n_pix);
    for (auto& v : s.pixels) {
        v = r.f32("pixels");
        if (!std::isfinite(v)) throw FormatError("pixels", "not finite");
    }
    require_payload(r, frames, 128, "poses");
    s.poses.resize(frames);
    for (std::size_t m = 0; m < frames; ++m) {
        s.poses[m] = read_mat4(r, "poses");
        if (!is_rigid(s.poses[m], 1e-6)) throw FormatError("poses", "pose " + std::to_string(m) + " is not rigid");
    }
    require_payload(r, landmarks, 24, "landmark_count");
    s.landmarks.resize(landmarks);
    for (auto& l : s.landmarks)
        for (int a = 0; a < 3; ++a) l[a] = finite_f64(r, "landmarks");
    r.finish();
    return s;
}

std::string encode_volume(const VolumeGrid& vol) {
    vol.validate();
    ByteWriter w;
    write_grid_header(w, "FUSV", vol.geometry);
    for (float v : vol.values) w.f32(v);
    for (auto m : vol.mask) w.u8(m);
    return w.take();
}

VolumeGrid decode_volume(std::string_view bytes) {
    ByteReader r(bytes);
    const GridGeometry g = read_grid_header(r, "FUSV");
    require_payload(r, g.dims.count(), 5, "values");
    VolumeGrid vol(g);
    for (auto& v : vol.values) {
        v = r.f32("values");
        if (!std::isfinite(v)) throw FormatError("values", "not finite");
    }
    for (auto& m : vol.mask) {
        m = r.u8("mask");
        if (m > 1) throw FormatError("mask", "entries must be 0 or 1");
    }
    r.finish();
    return vol;
}

std::string encode_ddf(const DisplacementField& ddf) {
    if (ddf.vectors.size() != ddf.geometry.dims.count()) throw InvalidArgument("ddf vector count does not match dims");
    ByteWriter w;
    write_grid_header(w, "FUSD", ddf.geometry);
    for (const auto& v : ddf.vectors)
        for (int a = 0; a < 3; ++a) w.f32(static_cast<float>(v[a]));
    return w.take();
}

DisplacementField decode_ddf(std::string_view bytes) {
    ByteReader r(bytes);
    const GridGeometry g = read_grid_header(r, "FUSD");
    require_payload(r, g.dims.count(), 12, "vectors");
    DisplacementField ddf(g);
    for (auto& v : ddf.vectors)
        for (int a = 0; a < 3; ++a) {
            v[a] = r.f32("vectors");
            if (!std::isfinite(v[a])) throw FormatError("vectors", "not finite");
        }
    r.finish();
    return ddf;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("error reading '" + path.string() + "'");
    return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            throw IoError("error writing '" + path.string() + "'");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("cannot move output into place at '" + path.string() + "'");
    }
}

ScanSequence read_scan(const std::filesystem::path& path) { return decode_scan(read_file(path)); }
void write_scan(const std::filesystem::path& path, const ScanSequence& scan) { write_file(path, encode_scan(scan)); }
VolumeGrid read_volume(const std::filesystem::path& path) { return decode_volume(read_file(path)); }
void write_volume(const std::filesystem::path& path, const VolumeGrid& vol) { write_file(path, encode_volume(vol)); }
DisplacementField read_ddf(const std::filesystem::path& path) { return decode_ddf(read_file(path)); }
void write_ddf(const std::filesystem::path& path, const DisplacementField& ddf) { write_file(path, encode_ddf(ddf)); }

std::string format_transforms(const std::vector<RigidParams>& params) {
    std::string out;
    for (const auto& p : params) {
        const auto a = p.to_array();
        for (int k = 0; k < 6; ++k) {
            if (k) out += ' ';
            out += fmt_double(a[k]);
        }
        out += '\n';
    }
    return out;
}

std::vector<RigidParams> parse_transforms(std::string_view text) {
    std::vector<RigidParams> out;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view line = trim(text.substr(0, nl));
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (line.empty() || line.front() == '#') continue;
        std::array<double, 6> a{};
        int k = 0;
        while (!line.empty()) {
            const auto sp = line.find_first_of(" \t");
            const auto tok = line.substr(0, sp);
            if (k == 6) throw FormatError("transforms", "line " + std::to_string(line_no) + " has more than 6 values");
            try {
                a[k++] = parse_double(tok, "value");
            } catch (const InvalidArgument& e) {
                throw FormatError("transforms", "line " + std::to_string(line_no) + ": " + e.what());
            }
            line = sp == std::string_view::npos ? std::string_view{} : trim(line.substr(sp));
        }
        if (k != 6) throw FormatError("transforms", "line " + std::to_string(line_no) + " has " + std::to_string(k) + " values, expected 6");
        out.push_back(RigidParams::from_array(a));
    }
    return out;
}

std::string pgm_slice(const VolumeGrid& vol, int axis, int index) {
    if (axis < 0 || axis > 2) throw InvalidArgument("slice axis must be 0, 1 or 2");
    const auto& d = vol.dims();
    if (index < 0 || index >= d[axis])
        throw InvalidArgument("slice index " + std::to_string(index) + " out of range [0, " + std::to_string(d[axis] - 1) + "]");
    // In-plane axes in increasing order: columns are the lower axis.
    const int ca = axis == 0 ? 1 : 0;
    const int ra = axis == 2 ? 1 : 2;
    const int w = d[ca], h = d[ra];
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            int n[3];
            n[axis] = index;
            n[ca] = c;
            n[ra] = r;
            const auto i = d.index(n[0], n[1], n[2]);
            const double v = vol.mask[i] ? std::clamp(static_cast<double>(vol.values[i]), 0.0, 1.0) : 0.0;
            out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
        }
    return out;
}

// ---------------------------------------------------------------------------
// RunConfig

namespace {

struct Key {
    const char* name;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class T>
std::string str(T v) {
    if constexpr (std::is_floating_point_v<T>)
        return fmt_double(v);
    else
        return std::to_string(v);
}

#define FUS_DOUBLE(name, field) \
    Key { name, [](RunConfig& c, const std::string& v) { c.field = parse_double(v, name); }, [](const RunConfig& c) { return str(c.field); } }
#define FUS_INT(name, field) \
    Key { name, [](RunConfig& c, const std::string& v) { c.field = parse_int<int>(v, name); }, [](const RunConfig& c) { return str(c.field); } }
#define FUS_U64(name, field) \
    Key { name, [](RunConfig& c, const std::string& v) { c.field = parse_int<std::uint64_t>(v, name); }, [](const RunConfig& c) { return str(c.field); } }

const std::vector<Key>& keys() {
    static const std::vector<Key> table = {
        // simulation
        FUS_INT("frames", simulation.trajectory.frames),
        FUS_DOUBLE("length_mm", simulation.trajectory.length_mm),
        Key{"shape", [](RunConfig& c, const std::string& v) { c.simulation.trajectory.shape = parse_trajectory_shape(v); },
            [](const RunConfig& c) { return to_string(c.simulation.trajectory.shape); }},
        Key{"orientation",
            [](RunConfig& c, const std::string& v) { c.simulation.trajectory.orientation = parse_probe_orientation(v); },
            [](const RunConfig& c) { return to_string(c.simulation.trajectory.orientation); }},
        FUS_DOUBLE("curvature", simulation.trajectory.curvature),
        FUS_DOUBLE("s_heading_rad", simulation.trajectory.s_heading_rad),
        FUS_DOUBLE("s_period_mm", simulation.trajectory.s_period_mm),
        FUS_INT("width", simulation.dims.width),
        FUS_INT("height", simulation.dims.height),
        FUS_DOUBLE("pixel_spacing_mm", simulation.pixel_spacing_mm),
        FUS_DOUBLE("fps", simulation.fps),
        FUS_U64("seed", simulation.seed),
        FUS_DOUBLE("speckle", simulation.phantom.speckle),
        FUS_DOUBLE("motion_amplitude_mm", simulation.motion.amplitude_mm),
        FUS_DOUBLE("motion_smoothness_mm", simulation.motion.smoothness_mm),
        Key{"motion_temporal",
            [](RunConfig& c, const std::string& v) {
                if (v == "static") c.simulation.motion.temporal = MotionTemporal::static_field;
                else if (v == "drift") c.simulation.motion.temporal = MotionTemporal::drift;
                else throw InvalidArgument("motion_temporal: expected static|drift, got '" + v + "'");
            },
            [](const RunConfig& c) {
                return std::string(c.simulation.motion.temporal == MotionTemporal::drift ? "drift" : "static");
            }},
        FUS_U64("motion_seed", simulation.motion.seed),
        // solver
        Key{"mode", [](RunConfig& c, const std::string& v) { c.solver.mode = parse_solver_mode(v); },
            [](const RunConfig& c) { return to_string(c.solver.mode); }},
        FUS_DOUBLE("learning_rate", solver.learning_rate),
        FUS_DOUBLE("rotation_lr_scale", solver.rotation_lr_scale),
        FUS_INT("max_iters", solver.max_iters),
        Key{"alpha_mode", [](RunConfig& c, const std::string& v) { c.solver.alpha_mode = parse_alpha_mode(v); },
            [](const RunConfig& c) { return to_string(c.solver.alpha_mode); }},
        FUS_DOUBLE("alpha", solver.alpha),
        FUS_INT("control_grid_stride", solver.control_grid_stride),
        Key{"def_to_rigid_gradient",
            [](RunConfig& c, const std::string& v) { c.solver.def_to_rigid_gradient = parse_def_to_rigid(v); },
            [](const RunConfig& c) { return to_string(c.solver.def_to_rigid_gradient); }},
        FUS_DOUBLE("fd_step_mm", solver.fd_step_mm),
        FUS_DOUBLE("tol", solver.tol),
        FUS_U64("solver_seed", solver.seed),
        FUS_INT("recon_stride", solver.recon_stride),
        FUS_INT("volume_stride", solver.volume_stride),
        FUS_DOUBLE("smooth_weight", solver.smooth_weight),
        Key{"check_gradients", [](RunConfig& c, const std::string& v) { c.solver.check_gradients = parse_bool(v, "check_gradients"); },
            [](const RunConfig& c) { return std::string(c.solver.check_gradients ? "true" : "false"); }},
        // reconstruction / initialisation / evaluation
        FUS_DOUBLE("volume_spacing_mm", volume_spacing_mm),
        FUS_INT("reconstruct_stride", reconstruct_stride),
        FUS_DOUBLE("perturb_trans_mm", perturb_trans_mm),
        FUS_DOUBLE("perturb_rot_deg", perturb_rot_deg),
        FUS_U64("perturb_seed", perturb_seed),
        FUS_INT("eval_interval", eval_interval),
        FUS_INT("eval_stride", eval_stride),
    };
    return table;
}

#undef FUS_DOUBLE
#undef FUS_INT
#undef FUS_U64

}  // namespace

RunConfig::RunConfig() { simulation.placement = SimulationConfig::default_placement(); }

void RunConfig::set(const std::string& key, const std::string& value) {
    for (const auto& k : keys())
        if (key == k.name) {
            k.set(*this, value);
            return;
        }
    throw InvalidArgument("unknown config key '" + key + "'");
}

RunConfig RunConfig::parse(std::string_view text) {
    RunConfig c;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos)
            throw InvalidArgument("config line " + std::to_string(line_no) + ": expected key=value");
        c.set(std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))));
    }
    c.validate();
    return c;
}

void RunConfig::validate() const {
    simulation.trajectory.validate();
    if (simulation.dims.width < 2 || simulation.dims.height < 2) throw InvalidArgument("width and height must be >= 2");
    if (!(simulation.pixel_spacing_mm > 0)) throw InvalidArgument("pixel_spacing_mm must be positive");
    if (!(simulation.fps > 0)) throw InvalidArgument("fps must be positive");
    if (!(simulation.phantom.speckle >= 0 && simulation.phantom.speckle <= 1)) throw InvalidArgument("speckle must be in [0, 1]");
    if (!(simulation.motion.amplitude_mm >= 0)) throw InvalidArgument("motion_amplitude_mm must be >= 0");
    if (!(simulation.motion.smoothness_mm > 0)) throw InvalidArgument("motion_smoothness_mm must be positive");
    solver.validate();
    if (!(volume_spacing_mm > 0)) throw InvalidArgument("volume_spacing_mm must be positive");
    if (reconstruct_stride < 1) throw InvalidArgument("reconstruct_stride must be >= 1");
    if (!(perturb_trans_mm >= 0) || !(perturb_rot_deg >= 0)) throw InvalidArgument("perturbation sigmas must be >= 0");
    if (eval_interval < 1) throw InvalidArgument("eval_interval must be >= 1");
    if (eval_stride < 1) throw InvalidArgument("eval_stride must be >= 1");
}

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& k : keys()) out.emplace_back(k.name, k.get(*this));
    return out;
}

std::string RunConfig::to_text() const {
    std::string out;
    for (const auto& [k, v] : entries()) out += k + " = " + v + "\n";
    return out;
}

}  // namespace fus
