#pragma once

// Persistence and data synthesis.
//
// Tensor container:  "VTSR" | version u8 (1) | dtype u8 (0 = f32) | rank u8 |
//                    rank x u64 LE dims | row-major f32 LE payload
// Checkpoint:        "VSRCKPT1" | count u32 LE |
//                    count x (name length u16 LE | UTF-8 name | tensor container)

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include "vsr/image.hpp"
#include "vsr/models.hpp"

namespace vsr {

/// Untracked float tensor as stored on disk.
struct RawTensor {
    Shape shape;
    std::vector<float> data;

    bool operator==(const RawTensor&) const = default;
};

namespace detail {

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(char(v)); }

template <typename U>
void put_le(std::ostream& os, U v)
{
    for (std::size_t i = 0; i < sizeof(U); ++i) os.put(char((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(std::istream& is, const char* what)
{
    std::array<unsigned char, sizeof(U)> b{};
    if (!is.read(reinterpret_cast<char*>(b.data()), sizeof(U)))
        throw FormatError(std::string("truncated input while reading ") + what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(b[i]) << (8 * i);
    return v;
}

inline std::ofstream open_out(const std::filesystem::path& path)
{
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    return os;
}

inline std::ifstream open_in(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    return is;
}

} // namespace detail

inline constexpr char kTensorMagic[4] = {'V', 'T', 'S', 'R'};
inline constexpr char kCheckpointMagic[8] = {'V', 'S', 'R', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint8_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

inline void write_tensor(std::ostream& os, const Shape& shape, std::span<const float> data)
{
    if (shape.size() > 255) throw ContractError("tensor rank exceeds container limit");
    if (numel(shape) != data.size()) throw ShapeError("write_tensor: shape/data size mismatch");
    os.write(kTensorMagic, 4);
    detail::put_u8(os, kTensorVersion);
    detail::put_u8(os, kDtypeF32);
    detail::put_u8(os, std::uint8_t(shape.size()));
    for (auto d : shape) detail::put_le<std::uint64_t>(os, d);
    for (float v : data) detail::put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
}

inline RawTensor read_tensor(std::istream& is)
{
    char magic[4];
    if (!is.read(magic, 4)) throw FormatError("truncated tensor header");
    if (!std::equal(magic, magic + 4, kTensorMagic))
        throw FormatError("bad tensor magic \"" + std::string(magic, 4) + "\"");
    const auto version = detail::get_le<std::uint8_t>(is, "version");
    if (version != kTensorVersion) throw FormatError("unsupported tensor version " + std::to_string(version));
    const auto dtype = detail::get_le<std::uint8_t>(is, "dtype");
    if (dtype != kDtypeF32) throw FormatError("unsupported tensor dtype " + std::to_string(dtype));
    const auto rank = detail::get_le<std::uint8_t>(is, "rank");
    RawTensor t;
    for (std::uint8_t i = 0; i < rank; ++i) {
        const auto d = detail::get_le<std::uint64_t>(is, "dims");
        if (d == 0) throw FormatError("zero-sized tensor dimension");
        t.shape.push_back(std::size_t(d));
    }
    const std::size_t n = numel(t.shape);
    t.data.resize(n);
    std::vector<unsigned char> raw(n * 4);
    if (!is.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size())))
        throw FormatError("truncated tensor payload: expected " + std::to_string(n) + " values");
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= std::uint32_t(raw[4 * i + b]) << (8 * b);
        t.data[i] = std::bit_cast<float>(u);
    }
    return t;
}

inline void save_tensor(const std::filesystem::path& path, const RawTensor& t)
{
    auto os = detail::open_out(path);
    write_tensor(os, t.shape, t.data);
    if (!os) throw IoError("write failed for " + path.string());
}

inline RawTensor load_tensor(const std::filesystem::path& path)
{
    auto is = detail::open_in(path);
    return read_tensor(is);
}

template <typename T>
RawTensor to_raw(const Tensor<T>& t)
{
    return {t.shape(), std::vector<float>(t.data().begin(), t.data().end())};
}

/// H x W x 2 tensor of (dx, dy).
inline RawTensor to_raw(const FlowField& f) { return {{f.height, f.width, 2}, f.vectors}; }

inline FlowField flow_from_raw(const RawTensor& t)
{
    if (t.shape.size() != 3 || t.shape[2] != 2) throw FormatError("flow tensor must be H x W x 2");
    FlowField f(t.shape[0], t.shape[1]);
    f.vectors = t.data;
    return f;
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Ordered named tensors; names are unique.
class Checkpoint {
public:
    void add(const std::string& name, RawTensor t)
    {
        if (index_.count(name)) throw FormatError("duplicate checkpoint entry " + name);
        index_[name] = entries_.size();
        entries_.emplace_back(name, std::move(t));
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    const RawTensor& at(const std::string& name) const
    {
        auto it = index_.find(name);
        if (it == index_.end()) throw FormatError("checkpoint has no entry " + name);
        return entries_[it->second].second;
    }
    const std::vector<std::pair<std::string, RawTensor>>& entries() const { return entries_; }
    bool operator==(const Checkpoint& o) const { return entries_ == o.entries_; }

private:
    std::vector<std::pair<std::string, RawTensor>> entries_;
    std::map<std::string, std::size_t> index_;
};

inline void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path)
{
    auto os = detail::open_out(path);
    os.write(kCheckpointMagic, 8);
    detail::put_le<std::uint32_t>(os, std::uint32_t(ckpt.entries().size()));
    for (const auto& [name, t] : ckpt.entries()) {
        if (name.size() > 0xffff) throw ContractError("checkpoint entry name too long");
        detail::put_le<std::uint16_t>(os, std::uint16_t(name.size()));
        os.write(name.data(), std::streamsize(name.size()));
        write_tensor(os, t.shape, t.data);
    }
    if (!os) throw IoError("write failed for " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path)
{
    auto is = detail::open_in(path);
    char magic[8] = {};
    is.read(magic, 8);
    if (is.gcount() != 8 || !std::equal(magic, magic + 8, kCheckpointMagic))
        throw FormatError("bad checkpoint magic \"" + std::string(magic, std::size_t(is.gcount())) + "\" in " +
                          path.string());
    const auto count = detail::get_le<std::uint32_t>(is, "entry count");
    Checkpoint ckpt;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = detail::get_le<std::uint16_t>(is, "name length");
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw FormatError("truncated checkpoint entry name");
        ckpt.add(name, read_tensor(is));
    }
    return ckpt;
}

template <typename T>
void store_params(Checkpoint& ckpt, const std::string& prefix, const ParamSet<T>& params)
{
    for (const auto& [name, t] : params) ckpt.add(prefix + name, to_raw(t));
}

/// Copies `prefix`-scoped entries into `params`, which fixes the expected
/// architecture. Missing, unexpected or mis-shaped entries are reported
/// together by name.
template <typename T>
void load_params(const Checkpoint& ckpt, const std::string& prefix, ParamSet<T>& params)
{
    std::vector<std::string> missing, extra, mismatched;
    for (const auto& [name, t] : params) {
        if (!ckpt.contains(prefix + name)) {
            missing.push_back(prefix + name);
            continue;
        }
        if (ckpt.at(prefix + name).shape != t.shape()) mismatched.push_back(prefix + name);
    }
    for (const auto& [name, t] : ckpt.entries())
        if (name.rfind(prefix, 0) == 0 && !params.contains(name.substr(prefix.size()))) extra.push_back(name);
    if (!missing.empty() || !extra.empty() || !mismatched.empty()) {
        auto join = [](const std::vector<std::string>& v) {
            std::string s;
            for (const auto& n : v) s += (s.empty() ? "" : ", ") + n;
            return s;
        };
        std::string msg = "checkpoint does not match architecture";
        if (!missing.empty()) msg += "; missing: " + join(missing);
        if (!extra.empty()) msg += "; unknown: " + join(extra);
        if (!mismatched.empty()) msg += "; shape mismatch: " + join(mismatched);
        throw FormatError(msg);
    }
    for (const auto& [name, t] : params) {
        const auto& src = ckpt.at(prefix + name);
        auto dst = t;
        std::transform(src.data.begin(), src.data.end(), dst.data().begin(), [](float v) { return T(v); });
    }
}

// ---------------------------------------------------------------------------
// Images

inline void save_png(const std::filesystem::path& path, const Image& img)
{
    if (img.channels != 1 && img.channels != 3) throw ContractError("save_png: expects 1 or 3 channels");
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = png_uint_32(img.width);
    png.height = png_uint_32(img.height);
    png.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    const std::size_t plane = img.height * img.width;
    std::vector<png_byte> buf(plane * img.channels);
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < img.channels; ++c) {
            const float v = std::clamp(img.data[c * plane + i], 0.0f, 1.0f);
            buf[i * img.channels + c] = png_byte(std::lround(v * 255.0f));
        }
    if (!png_image_write_to_file(&png, path.string().c_str(), 0, buf.data(), 0, nullptr))
        throw IoError("cannot write " + path.string() + ": " + png.message);
}

/// RGB image with 8-bit samples mapped to [0,1].
inline Image load_png(const std::filesystem::path& path)
{
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.string().c_str()))
        throw IoError("cannot read " + path.string() + ": " + png.message);
    png.format = PNG_FORMAT_RGB;
    std::vector<png_byte> buf(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&png);
        throw IoError("cannot decode " + path.string() + ": " + png.message);
    }
    Image img(3, png.height, png.width);
    const std::size_t plane = img.height * img.width;
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c) img.data[c * plane + i] = float(buf[i * 3 + c]) / 255.0f;
    return img;
}

inline std::string frame_filename(std::size_t index)
{
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%06zu.png", index);
    return name;
}

/// Loads frame_NNNNNN.png files in lexicographic filename order.
inline FrameSequence load_frame_sequence(const std::filesystem::path& dir)
{
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    static const std::regex pattern(R"(frame_\d{6}\.png)");
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && std::regex_match(entry.path().filename().string(), pattern))
            files.push_back(entry.path());
    if (files.empty()) throw IoError("no frame_NNNNNN.png files in " + dir.string());
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
    FrameSequence seq;
    for (const auto& f : files) {
        Image img = load_png(f);
        if (!seq.empty() && !img.same_dims(seq[0]))
            throw ShapeError("frame " + f.filename().string() + " is " + std::to_string(img.width) + "x" +
                             std::to_string(img.height) + ", expected " + std::to_string(seq[0].width) + "x" +
                             std::to_string(seq[0].height));
        seq.frames.push_back(std::move(img));
    }
    return seq;
}

inline void save_frame_sequence(const std::filesystem::path& dir, const FrameSequence& seq)
{
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < seq.size(); ++i) save_png(dir / frame_filename(i), seq[i]);
}

// ---------------------------------------------------------------------------
// Resampling

inline bool is_power_of_two(std::size_t v) { return v >= 1 && (v & (v - 1)) == 0; }

namespace detail {

// Catmull-Rom cubic, a = -0.5.
inline double cubic_kernel(double x)
{
    constexpr double a = -0.5;
    x = std::abs(x);
    if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
    return 0.0;
}

struct Taps {
    std::vector<std::vector<std::pair<std::size_t, double>>> rows;
};

// Kernel stretched by `factor` so the downscale is antialiased.
inline Taps downscale_taps(std::size_t in, std::size_t factor)
{
    const std::size_t out = in / factor;
    Taps taps;
    const double f = double(factor);
    for (std::size_t i = 0; i < out; ++i) {
        const double centre = (double(i) + 0.5) * f - 0.5;
        std::vector<std::pair<std::size_t, double>> row;
        double norm = 0.0;
        for (long j = long(std::floor(centre - 2.0 * f)); j <= long(std::ceil(centre + 2.0 * f)); ++j) {
            const double wt = cubic_kernel((double(j) - centre) / f);
            if (wt == 0.0) continue;
            row.emplace_back(std::size_t(std::clamp<long>(j, 0, long(in) - 1)), wt);
            norm += wt;
        }
        for (auto& [idx, wt] : row) wt /= norm;
        taps.rows.push_back(std::move(row));
    }
    return taps;
}

} // namespace detail

/// Separable Catmull-Rom downscale by a power-of-two factor, clamped to [0,1].
inline Image bicubic_downscale(const Image& src, std::size_t factor)
{
    if (!is_power_of_two(factor)) throw ContractError("bicubic_downscale: factor must be a power of two");
    if (src.height % factor != 0 || src.width % factor != 0)
        throw ShapeError("bicubic_downscale: dims not divisible by " + std::to_string(factor));
    const std::size_t oh = src.height / factor, ow = src.width / factor;
    const auto tx = detail::downscale_taps(src.width, factor), ty = detail::downscale_taps(src.height, factor);
    Image out(src.channels, oh, ow);
    std::vector<double> tmp(src.height * ow);
    for (std::size_t c = 0; c < src.channels; ++c) {
        for (std::size_t y = 0; y < src.height; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                double acc = 0.0;
                for (const auto& [idx, wt] : tx.rows[x]) acc += wt * double(src.at(c, y, idx));
                tmp[y * ow + x] = acc;
            }
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                double acc = 0.0;
                for (const auto& [idx, wt] : ty.rows[y]) acc += wt * tmp[idx * ow + x];
                out.at(c, y, x) = float(std::clamp(acc, 0.0, 1.0));
            }
    }
    return out;
}

inline Image nearest_upscale(const Image& src, std::size_t factor)
{
    Image out(src.channels, src.height * factor, src.width * factor);
    for (std::size_t c = 0; c < src.channels; ++c)
        for (std::size_t y = 0; y < out.height; ++y)
            for (std::size_t x = 0; x < out.width; ++x) out.at(c, y, x) = src.at(c, y / factor, x / factor);
    return out;
}

inline Image crop(const Image& src, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w)
{
    if (y0 + h > src.height || x0 + w > src.width) throw ShapeError("crop: window outside image");
    Image out(src.channels, h, w);
    for (std::size_t c = 0; c < src.channels; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = src.at(c, y0 + y, x0 + x);
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic clips with known motion

enum class SynthKind { translating_texture, moving_checker, gradient_drift };

struct SynthSpec {
    SynthKind kind = SynthKind::translating_texture;
    double vx = 1.0;
    double vy = 0.0;
    std::size_t frames = 3;
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t scale = 4;
    std::uint64_t seed = 0;

    void validate() const
    {
        if (std::abs(vx) > 4.0 || std::abs(vy) > 4.0) throw ContractError("synth velocity components must be <= 4");
        if (frames == 0 || height == 0 || width == 0) throw ContractError("synth dims must be positive");
        if (!is_power_of_two(scale) || height % scale || width % scale)
            throw ContractError("synth dims must be divisible by a power-of-two scale");
    }
};

struct SynthClip {
    FrameSequence hr;
    FrameSequence lr;
    /// Constant-velocity ground truth between consecutive HR frames.
    std::vector<FlowField> flow;
};

namespace detail {

struct Wave {
    double fx, fy, amp, phase;
};

inline double wrap(double v, double period)
{
    double r = std::fmod(v, period);
    return r < 0.0 ? r + period : r;
}

} // namespace detail

/// Frame t is the periodic base pattern translated by t * velocity.
inline SynthClip synth_sequence(const SynthSpec& spec)
{
    spec.validate();
    Rng rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double two_pi = 2.0 * std::acos(-1.0);
    const double H = double(spec.height), W = double(spec.width);

    std::array<std::vector<detail::Wave>, 3> waves;
    std::array<double, 3> lo{}, hi{};
    for (std::size_t c = 0; c < 3; ++c) {
        lo[c] = 0.1 + 0.3 * unit(rng);
        hi[c] = 0.6 + 0.3 * unit(rng);
        const int count = spec.kind == SynthKind::translating_texture ? 6 : 1;
        for (int k = 0; k < count; ++k) {
            detail::Wave wv;
            if (spec.kind == SynthKind::translating_texture) {
                std::uniform_int_distribution<int> freq(-4, 4);
                do {
                    wv.fx = freq(rng);
                    wv.fy = freq(rng);
                } while (wv.fx == 0 && wv.fy == 0);
                wv.amp = 0.4 / count * (0.5 + unit(rng));
            } else {
                wv.fx = 1.0;
                wv.fy = 1.0;
                wv.amp = 0.4;
            }
            wv.phase = two_pi * unit(rng);
            waves[c].push_back(wv);
        }
    }
    const double cell = double(std::max<std::size_t>(2, std::min(spec.height, spec.width) / 8));

    auto pattern = [&](std::size_t c, double y, double x) {
        switch (spec.kind) {
        case SynthKind::moving_checker: {
            const long parity = long(std::floor(x / cell)) + long(std::floor(y / cell));
            return (parity % 2 == 0) ? lo[c] : hi[c];
        }
        default: {
            double v = 0.5;
            for (const auto& wv : waves[c]) v += wv.amp * std::cos(two_pi * (wv.fx * x / W + wv.fy * y / H) + wv.phase);
            return v;
        }
        }
    };

    SynthClip clip;
    for (std::size_t t = 0; t < spec.frames; ++t) {
        Image img(3, spec.height, spec.width);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < spec.height; ++y)
                for (std::size_t x = 0; x < spec.width; ++x) {
                    const double sy = detail::wrap(double(y) - double(t) * spec.vy, H);
                    const double sx = detail::wrap(double(x) - double(t) * spec.vx, W);
                    img.at(c, y, x) = float(std::clamp(pattern(c, sy, sx), 0.0, 1.0));
                }
        clip.lr.frames.push_back(bicubic_downscale(img, spec.scale));
        clip.hr.frames.push_back(std::move(img));
        if (t > 0) clip.flow.emplace_back(spec.height, spec.width, float(spec.vx), float(spec.vy));
    }
    return clip;
}

} // namespace vsr
