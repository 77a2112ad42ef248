#pragma once

// Motion pre-processing: dense optical flow by polynomial expansion
// (coarse-to-fine), temporal smoothing of the motion vectors, and frame
// alignment by bilinear warping.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <vector>

#include "vsr/image.hpp"

namespace vsr {

struct FlowParams {
    double pyr_scale = 0.5;
    int levels = 3;
    int winsize = 15;
    int iterations = 3;
    int poly_n = 5;
    double poly_sigma = 1.2;

    void validate() const
    {
        if (!(pyr_scale > 0.0 && pyr_scale < 1.0)) throw ContractError("flow: pyr_scale must lie in (0,1)");
        if (levels < 1) throw ContractError("flow: levels must be >= 1");
        if (winsize < 3 || winsize % 2 == 0) throw ContractError("flow: winsize must be odd and >= 3");
        if (iterations < 1) throw ContractError("flow: iterations must be >= 1");
        if (poly_n != 5 && poly_n != 7) throw ContractError("flow: poly_n must be 5 or 7");
        if (!(poly_sigma > 0.0)) throw ContractError("flow: poly_sigma must be positive");
    }
};

struct SmoothingParams {
    double alpha = 0.9;
    /// Symmetric Gaussian window over time instead of the moving average.
    bool gaussian = false;
    double gaussian_sigma = 1.0;

    void validate() const
    {
        if (!(alpha > 0.0 && alpha <= 1.0)) throw ContractError("smoothing alpha must lie in (0,1]");
        if (gaussian && !(gaussian_sigma > 0.0)) throw ContractError("smoothing sigma must be positive");
    }
};

/// BT.601 luma.
inline Image to_grayscale(const Image& frame)
{
    if (frame.channels != 3) throw ShapeError("to_grayscale: expected 3 channels, got " + std::to_string(frame.channels));
    Image out(1, frame.height, frame.width);
    const std::size_t plane = frame.height * frame.width;
    for (std::size_t i = 0; i < plane; ++i)
        out.data[i] = 0.299f * frame.data[i] + 0.587f * frame.data[plane + i] + 0.114f * frame.data[2 * plane + i];
    return out;
}

namespace detail {

struct Plane {
    std::size_t h = 0, w = 0;
    std::vector<double> v;

    Plane() = default;
    Plane(std::size_t hh, std::size_t ww, double fill = 0.0) : h(hh), w(ww), v(hh * ww, fill) {}
    double& operator()(std::size_t y, std::size_t x) { return v[y * w + x]; }
    double operator()(std::size_t y, std::size_t x) const { return v[y * w + x]; }

    double clamped(long y, long x) const
    {
        y = std::clamp<long>(y, 0, long(h) - 1);
        x = std::clamp<long>(x, 0, long(w) - 1);
        return v[std::size_t(y) * w + std::size_t(x)];
    }

    double bilinear(double y, double x) const
    {
        x = std::clamp(x, 0.0, double(w - 1));
        y = std::clamp(y, 0.0, double(h - 1));
        const long x0 = long(std::floor(x)), y0 = long(std::floor(y));
        const double fx = x - double(x0), fy = y - double(y0);
        const double top = clamped(y0, x0) + fx * (clamped(y0, x0 + 1) - clamped(y0, x0));
        const double bot = clamped(y0 + 1, x0) + fx * (clamped(y0 + 1, x0 + 1) - clamped(y0 + 1, x0));
        return top + fy * (bot - top);
    }
};

inline Plane gaussian_blur(const Plane& src, double sigma)
{
    if (sigma <= 0.0) return src;
    int radius = std::max(1, int(std::lround(sigma * 5.0)) / 2);
    std::vector<double> k(2 * radius + 1);
    double s = 0.0;
    for (int i = -radius; i <= radius; ++i) s += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= s;
    Plane tmp(src.h, src.w), out(src.h, src.w);
    for (std::size_t y = 0; y < src.h; ++y)
        for (std::size_t x = 0; x < src.w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * src.clamped(long(y), long(x) + i);
            tmp(y, x) = acc;
        }
    for (std::size_t y = 0; y < src.h; ++y)
        for (std::size_t x = 0; x < src.w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp.clamped(long(y) + i, long(x));
            out(y, x) = acc;
        }
    return out;
}

// Pixel-centre aligned bilinear resize.
inline Plane resize(const Plane& src, std::size_t h, std::size_t w)
{
    Plane out(h, w);
    const double sy = double(src.h) / double(h), sx = double(src.w) / double(w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            out(y, x) = src.bilinear((double(y) + 0.5) * sy - 0.5, (double(x) + 0.5) * sx - 0.5);
    return out;
}

inline Plane box_filter(const Plane& src, int win)
{
    const int r = win / 2;
    Plane tmp(src.h, src.w), out(src.h, src.w);
    for (std::size_t y = 0; y < src.h; ++y)
        for (std::size_t x = 0; x < src.w; ++x) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i) acc += src.clamped(long(y), long(x) + i);
            tmp(y, x) = acc / double(win);
        }
    for (std::size_t y = 0; y < src.h; ++y)
        for (std::size_t x = 0; x < src.w; ++x) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i) acc += tmp.clamped(long(y) + i, long(x));
            out(y, x) = acc / double(win);
        }
    return out;
}

// Local model f(p + (x,y)) ~ c + bx*x + by*y + axx*x^2 + ayy*y^2 + 2*axy*x*y.
struct PolyCoeffs {
    Plane bx, by, axx, ayy, axy;
};

inline PolyCoeffs polynomial_expansion(const Plane& img, int poly_n, double sigma)
{
    const int n = poly_n / 2;
    auto basis = [](double x, double y) { return std::array<double, 6>{1.0, x, y, x * x, y * y, x * y}; };
    Eigen::Matrix<double, 6, 6> gram = Eigen::Matrix<double, 6, 6>::Zero();
    std::vector<double> weight;
    std::vector<std::array<double, 6>> phi;
    for (int dy = -n; dy <= n; ++dy)
        for (int dx = -n; dx <= n; ++dx) {
            const double wt = std::exp(-double(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            auto b = basis(dx, dy);
            for (int i = 0; i < 6; ++i)
                for (int j = 0; j < 6; ++j) gram(i, j) += wt * b[i] * b[j];
            weight.push_back(wt);
            phi.push_back(b);
        }
    // Row k of `proj` maps the windowed samples to coefficient k.
    const Eigen::Matrix<double, 6, 6> inv = gram.inverse();
    const std::size_t taps = weight.size();
    Eigen::MatrixXd proj(6, taps);
    for (std::size_t t = 0; t < taps; ++t) {
        Eigen::Matrix<double, 6, 1> b;
        for (int i = 0; i < 6; ++i) b(i) = phi[t][i] * weight[t];
        proj.col(t) = inv * b;
    }

    PolyCoeffs r{Plane(img.h, img.w), Plane(img.h, img.w), Plane(img.h, img.w), Plane(img.h, img.w),
                 Plane(img.h, img.w)};
    std::vector<double> window(taps);
    for (std::size_t y = 0; y < img.h; ++y)
        for (std::size_t x = 0; x < img.w; ++x) {
            std::size_t t = 0;
            for (int dy = -n; dy <= n; ++dy)
                for (int dx = -n; dx <= n; ++dx) window[t++] = img.clamped(long(y) + dy, long(x) + dx);
            double c[6] = {0, 0, 0, 0, 0, 0};
            for (int k = 0; k < 6; ++k)
                for (std::size_t s = 0; s < taps; ++s) c[k] += proj(k, long(s)) * window[s];
            r.bx(y, x) = c[1];
            r.by(y, x) = c[2];
            r.axx(y, x) = c[3];
            r.ayy(y, x) = c[4];
            r.axy(y, x) = 0.5 * c[5];
        }
    return r;
}

// Per-pixel normal equations [g11 g12 g22 h1 h2] for A d = delta_b.
struct FlowSystem {
    Plane g11, g12, g22, h1, h2;
};

inline double border_weight(std::size_t i, std::size_t n)
{
    static constexpr double ramp[5] = {0.14, 0.14, 0.4472, 0.8781, 0.9991};
    const std::size_t d = std::min(i, n - 1 - i);
    return d < 5 ? ramp[d] : 1.0;
}

inline FlowSystem build_system(const PolyCoeffs& r0, const PolyCoeffs& r1, const Plane& fx, const Plane& fy)
{
    const std::size_t h = fx.h, w = fx.w;
    FlowSystem m{Plane(h, w), Plane(h, w), Plane(h, w), Plane(h, w), Plane(h, w)};
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double dx = fx(y, x), dy = fy(y, x);
            const double sy = double(y) + dy, sx = double(x) + dx;
            const double a11 = 0.5 * (r0.axx(y, x) + r1.axx.bilinear(sy, sx));
            const double a22 = 0.5 * (r0.ayy(y, x) + r1.ayy.bilinear(sy, sx));
            const double a12 = 0.5 * (r0.axy(y, x) + r1.axy.bilinear(sy, sx));
            double db1 = -0.5 * (r1.bx.bilinear(sy, sx) - r0.bx(y, x)) + a11 * dx + a12 * dy;
            double db2 = -0.5 * (r1.by.bilinear(sy, sx) - r0.by(y, x)) + a12 * dx + a22 * dy;
            const double s = border_weight(x, w) * border_weight(y, h);
            const double b11 = a11 * s, b12 = a12 * s, b22 = a22 * s;
            db1 *= s;
            db2 *= s;
            m.g11(y, x) = b11 * b11 + b12 * b12;
            m.g12(y, x) = b12 * (b11 + b22);
            m.g22(y, x) = b22 * b22 + b12 * b12;
            m.h1(y, x) = b11 * db1 + b12 * db2;
            m.h2(y, x) = b12 * db1 + b22 * db2;
        }
    return m;
}

inline void solve_system(const FlowSystem& m, int winsize, Plane& fx, Plane& fy)
{
    const Plane g11 = box_filter(m.g11, winsize), g12 = box_filter(m.g12, winsize), g22 = box_filter(m.g22, winsize);
    const Plane h1 = box_filter(m.h1, winsize), h2 = box_filter(m.h2, winsize);
    for (std::size_t i = 0; i < fx.v.size(); ++i) {
        const double det = g11.v[i] * g22.v[i] - g12.v[i] * g12.v[i] + 1e-3;
        fx.v[i] = (g22.v[i] * h1.v[i] - g12.v[i] * h2.v[i]) / det;
        fy.v[i] = (g11.v[i] * h2.v[i] - g12.v[i] * h1.v[i]) / det;
    }
}

inline Plane to_plane(const Image& gray)
{
    Plane p(gray.height, gray.width);
    // 8-bit intensity scale keeps the solver's regulariser meaningful.
    for (std::size_t i = 0; i < p.v.size(); ++i) p.v[i] = 255.0 * double(gray.data[i]);
    return p;
}

inline constexpr std::size_t kMinPyramidSize = 16;

} // namespace detail

/// Dense flow from prev_gray to next_gray; next(p + d(p)) ~ prev(p).
inline FlowField estimate_flow(const Image& prev_gray, const Image& next_gray, const FlowParams& params = {})
{
    params.validate();
    if (prev_gray.channels != 1 || next_gray.channels != 1) throw ShapeError("estimate_flow: expects grayscale frames");
    if (!prev_gray.same_dims(next_gray)) throw ShapeError("estimate_flow: frame dims differ");
    const std::size_t h = prev_gray.height, w = prev_gray.width;
    if (h < std::size_t(2 * params.winsize) || w < std::size_t(2 * params.winsize))
        throw ContractError("estimate_flow: frames " + std::to_string(h) + "x" + std::to_string(w) +
                            " smaller than twice the window " + std::to_string(params.winsize));

    const detail::Plane base0 = detail::to_plane(prev_gray), base1 = detail::to_plane(next_gray);

    int levels = 0;
    for (double s = 1.0; levels < params.levels; ++levels, s *= params.pyr_scale)
        if (double(std::min(h, w)) * s < double(detail::kMinPyramidSize)) break;
    levels = std::max(levels, 1);

    detail::Plane fx, fy;
    for (int k = levels - 1; k >= 0; --k) {
        const double s = std::pow(params.pyr_scale, k);
        const std::size_t lh = std::max<std::size_t>(1, std::size_t(std::lround(double(h) * s)));
        const std::size_t lw = std::max<std::size_t>(1, std::size_t(std::lround(double(w) * s)));
        detail::Plane i0 = base0, i1 = base1;
        if (k > 0) {
            const double sigma = (1.0 / s - 1.0) * 0.5;
            i0 = detail::resize(detail::gaussian_blur(base0, sigma), lh, lw);
            i1 = detail::resize(detail::gaussian_blur(base1, sigma), lh, lw);
        }
        if (fx.v.empty()) {
            fx = detail::Plane(lh, lw);
            fy = detail::Plane(lh, lw);
        } else {
            const double rx = double(lw) / double(fx.w), ry = double(lh) / double(fx.h);
            fx = detail::resize(fx, lh, lw);
            fy = detail::resize(fy, lh, lw);
            for (auto& v : fx.v) v *= rx;
            for (auto& v : fy.v) v *= ry;
        }
        const auto r0 = detail::polynomial_expansion(i0, params.poly_n, params.poly_sigma);
        const auto r1 = detail::polynomial_expansion(i1, params.poly_n, params.poly_sigma);
        for (int it = 0; it < params.iterations; ++it) {
            const auto system = detail::build_system(r0, r1, fx, fy);
            detail::solve_system(system, params.winsize, fx, fy);
        }
    }

    FlowField flow(h, w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            flow.dx(y, x) = float(fx(y, x));
            flow.dy(y, x) = float(fy(y, x));
        }
    return flow;
}

/// Shrinks the window and pyramid so frames smaller than 2*winsize can
/// still be processed.
inline FlowParams fit_flow_params(FlowParams p, std::size_t h, std::size_t w)
{
    const int limit = int(std::min(h, w) / 2);
    if (p.winsize > limit) p.winsize = std::max(3, limit % 2 == 1 ? limit : limit - 1);
    return p;
}

/// flow[i] maps frame i to frame i+1.
inline std::vector<FlowField> estimate_motion_vectors(const FrameSequence& frames, const FlowParams& params = {})
{
    if (frames.size() < 2) throw ContractError("estimate_motion_vectors: need at least two frames");
    std::vector<FlowField> flows;
    Image prev = to_grayscale(frames[0]);
    for (std::size_t i = 1; i < frames.size(); ++i) {
        Image gray = to_grayscale(frames[i]);
        flows.push_back(estimate_flow(prev, gray, params));
        prev = std::move(gray);
    }
    return flows;
}

/// Exponential moving average s[i] = alpha f[i] + (1-alpha) s[i-1], or a
/// normalised Gaussian window over neighbouring indices.
inline std::vector<FlowField> smooth_motion_vectors(const std::vector<FlowField>& flows,
                                                    const SmoothingParams& params = {})
{
    params.validate();
    if (flows.empty()) throw ContractError("smooth_motion_vectors: empty flow list");
    for (const auto& f : flows)
        if (f.height != flows[0].height || f.width != flows[0].width)
            throw ShapeError("smooth_motion_vectors: flow dims differ");

    if (params.gaussian) {
        const int radius = int(std::ceil(3.0 * params.gaussian_sigma));
        std::vector<FlowField> out;
        for (std::size_t i = 0; i < flows.size(); ++i) {
            FlowField s(flows[0].height, flows[0].width);
            std::vector<double> acc(s.vectors.size(), 0.0);
            double norm = 0.0;
            for (int o = -radius; o <= radius; ++o) {
                const long j = long(i) + o;
                if (j < 0 || j >= long(flows.size())) continue;
                const double wt = std::exp(-0.5 * o * o / (params.gaussian_sigma * params.gaussian_sigma));
                norm += wt;
                for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += wt * flows[std::size_t(j)].vectors[k];
            }
            for (std::size_t k = 0; k < acc.size(); ++k) s.vectors[k] = float(acc[k] / norm);
            out.push_back(std::move(s));
        }
        return out;
    }

    if (params.alpha == 1.0) return flows;
    // prev + alpha (f - prev): same recurrence, and a constant field is a
    // fixed point bit for bit.
    const double a = params.alpha;
    std::vector<FlowField> out{flows[0]};
    for (std::size_t i = 1; i < flows.size(); ++i) {
        FlowField s = flows[i];
        const auto& prev = out.back().vectors;
        for (std::size_t k = 0; k < s.vectors.size(); ++k)
            s.vectors[k] = float(double(prev[k]) + a * (double(flows[i].vectors[k]) - double(prev[k])));
        out.push_back(std::move(s));
    }
    return out;
}

/// output(y,x) = bilinear sample of frame at (x + dx, y + dy), clamped to edges.
inline Image warp_frame(const Image& frame, const FlowField& flow)
{
    if (frame.height != flow.height || frame.width != flow.width)
        throw ShapeError("warp_frame: flow dims do not match frame");
    const std::size_t h = frame.height, w = frame.width;
    Image out(frame.channels, h, w);
    auto px = [&](std::size_t c, long y, long x) {
        y = std::clamp<long>(y, 0, long(h) - 1);
        x = std::clamp<long>(x, 0, long(w) - 1);
        return frame.at(c, std::size_t(y), std::size_t(x));
    };
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const float sx = std::clamp(float(x) + flow.dx(y, x), 0.0f, float(w - 1));
            const float sy = std::clamp(float(y) + flow.dy(y, x), 0.0f, float(h - 1));
            const long x0 = long(std::floor(sx)), y0 = long(std::floor(sy));
            const float fx = sx - float(x0), fy = sy - float(y0);
            for (std::size_t c = 0; c < frame.channels; ++c) {
                const float top = px(c, y0, x0) + fx * (px(c, y0, x0 + 1) - px(c, y0, x0));
                const float bot = px(c, y0 + 1, x0) + fx * (px(c, y0 + 1, x0 + 1) - px(c, y0 + 1, x0));
                out.at(c, y, x) = top + fy * (bot - top);
            }
        }
    return out;
}

/// Frame 0 is passed through; frame i is warped by smoothed[i-1] toward
/// the geometry of frame i-1.
inline FrameSequence align_frames(const FrameSequence& frames, const std::vector<FlowField>& smoothed)
{
    if (frames.empty() || smoothed.size() + 1 != frames.size())
        throw ContractError("align_frames: " + std::to_string(frames.size()) + " frames need " +
                            std::to_string(frames.size() ? frames.size() - 1 : 0) + " flows, got " +
                            std::to_string(smoothed.size()));
    FrameSequence out;
    out.fps = frames.fps;
    out.frames.push_back(frames[0]);
    for (std::size_t i = 1; i < frames.size(); ++i) out.frames.push_back(warp_frame(frames[i], smoothed[i - 1]));
    return out;
}

/// estimate -> smooth -> align in one pass.
inline FrameSequence motion_compensate(const FrameSequence& frames, const FlowParams& flow = {},
                                       const SmoothingParams& smoothing = {})
{
    if (frames.size() < 2) return frames;
    const auto fitted = fit_flow_params(flow, frames[0].height, frames[0].width);
    return align_frames(frames, smooth_motion_vectors(estimate_motion_vectors(frames, fitted), smoothing));
}

} // namespace vsr
