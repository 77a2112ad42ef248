#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vsr/image.hpp"

namespace vsr {

struct MetricParams {
    double psnr_max = 1.0;
    std::size_t ssim_window = 11;
    double ssim_sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;

    void validate() const
    {
        if (ssim_window == 0 || ssim_window % 2 == 0) throw ContractError("ssim window must be odd");
        if (!(k1 > 0.0 && k2 > 0.0)) throw ContractError("ssim constants must be positive");
        if (!(psnr_max > 0.0)) throw ContractError("psnr_max must be positive");
    }
};

inline double mse(const Image& a, const Image& b)
{
    if (!a.same_dims(b)) throw ShapeError("mse: image dims differ");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = double(a.data[i]) - double(b.data[i]);
        acc += d * d;
    }
    return acc / double(a.data.size());
}

inline double psnr_from_mse(double err, double peak = 1.0)
{
    if (err == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / err);
}

/// +infinity for identical inputs.
inline double psnr(const Image& a, const Image& b, const MetricParams& params = {})
{
    return psnr_from_mse(mse(a, b), params.psnr_max);
}

/// PSNR of the pooled squared error over all frames.
inline double psnr(const FrameSequence& a, const FrameSequence& b, const MetricParams& params = {})
{
    if (a.size() != b.size() || a.empty()) throw ShapeError("psnr: sequence lengths differ");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += mse(a[i], b[i]);
    return psnr_from_mse(acc / double(a.size()), params.psnr_max);
}

namespace detail {

inline std::vector<double> gaussian_window(std::size_t size, double sigma)
{
    std::vector<double> g(size);
    const double c = double(size / 2);
    double s = 0.0;
    for (std::size_t i = 0; i < size; ++i) s += g[i] = std::exp(-0.5 * (double(i) - c) * (double(i) - c) / (sigma * sigma));
    for (auto& v : g) v /= s;
    return g;
}

// Valid-region separable filtering of one plane.
inline std::vector<double> filter_valid(const std::vector<double>& src, std::size_t h, std::size_t w,
                                        const std::vector<double>& g)
{
    const std::size_t k = g.size(), oh = h - k + 1, ow = w - k + 1;
    std::vector<double> tmp(h * ow), out(oh * ow);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (std::size_t i = 0; i < k; ++i) acc += g[i] * src[y * w + x + i];
            tmp[y * ow + x] = acc;
        }
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (std::size_t i = 0; i < k; ++i) acc += g[i] * tmp[(y + i) * ow + x];
            out[y * ow + x] = acc;
        }
    return out;
}

} // namespace detail

/// Mean local SSIM over valid window positions, averaged over channels.
inline double ssim(const Image& a, const Image& b, const MetricParams& params = {})
{
    params.validate();
    if (!a.same_dims(b)) throw ShapeError("ssim: image dims differ");
    const std::size_t h = a.height, w = a.width, k = params.ssim_window;
    if (h < k || w < k) throw ShapeError("ssim: image smaller than the " + std::to_string(k) + "px window");
    const double c1 = std::pow(params.k1 * params.psnr_max, 2), c2 = std::pow(params.k2 * params.psnr_max, 2);
    const auto g = detail::gaussian_window(k, params.ssim_sigma);
    const std::size_t plane = h * w;

    double total = 0.0;
    for (std::size_t c = 0; c < a.channels; ++c) {
        std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
        for (std::size_t i = 0; i < plane; ++i) {
            x[i] = a.data[c * plane + i];
            y[i] = b.data[c * plane + i];
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mx = detail::filter_valid(x, h, w, g), my = detail::filter_valid(y, h, w, g);
        const auto sxx = detail::filter_valid(xx, h, w, g), syy = detail::filter_valid(yy, h, w, g);
        const auto sxy = detail::filter_valid(xy, h, w, g);
        double acc = 0.0;
        for (std::size_t i = 0; i < mx.size(); ++i) {
            const double va = sxx[i] - mx[i] * mx[i], vb = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
            acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) /
                   ((mx[i] * mx[i] + my[i] * my[i] + c1) * (va + vb + c2));
        }
        total += acc / double(mx.size());
    }
    return total / double(a.channels);
}

/// Mean over t >= 1 of mse(out[t] - out[t-1], target[t] - target[t-1]).
inline double temporal_inconsistency(const FrameSequence& out, const FrameSequence& target)
{
    if (out.size() != target.size()) throw ShapeError("temporal_inconsistency: sequence lengths differ");
    if (out.size() < 2) throw ContractError("temporal_inconsistency: need at least two frames");
    double total = 0.0;
    for (std::size_t t = 1; t < out.size(); ++t) {
        if (!out[t].same_dims(target[t]) || !out[t].same_dims(out[t - 1]))
            throw ShapeError("temporal_inconsistency: frame dims differ");
        double acc = 0.0;
        for (std::size_t i = 0; i < out[t].data.size(); ++i) {
            const double d = (double(out[t].data[i]) - double(out[t - 1].data[i])) -
                             (double(target[t].data[i]) - double(target[t - 1].data[i]));
            acc += d * d;
        }
        total += acc / double(out[t].data.size());
    }
    return total / double(out.size() - 1);
}

/// Percentage change of `updated` relative to `baseline`.
inline double relative_improvement(double updated, double baseline)
{
    if (!(baseline > 0.0)) throw ContractError("relative_improvement: baseline must be positive");
    return 100.0 * (updated - baseline) / baseline;
}

struct MetricReport {
    double psnr_db = 0.0;
    double ssim = 0.0;
    std::vector<double> per_frame_psnr;
    std::vector<double> per_frame_ssim;
    std::size_t infinite_frames = 0;
    bool all_psnr_infinite = false;
    std::optional<double> temporal_inconsistency;
};

/// Per-frame PSNR/SSIM. The PSNR mean is the arithmetic mean of finite
/// per-frame dB values; infinite frames are counted separately.
inline MetricReport evaluate_sequence(const FrameSequence& pred, const FrameSequence& gt, const MetricParams& params = {})
{
    if (pred.size() != gt.size())
        throw ShapeError("evaluate: " + std::to_string(pred.size()) + " predicted frames vs " +
                         std::to_string(gt.size()) + " ground-truth frames");
    if (pred.empty()) throw ContractError("evaluate: empty sequences");
    MetricReport r;
    double psnr_sum = 0.0, ssim_sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double p = psnr(pred[i], gt[i], params), s = ssim(pred[i], gt[i], params);
        r.per_frame_psnr.push_back(p);
        r.per_frame_ssim.push_back(s);
        ssim_sum += s;
        if (std::isinf(p))
            ++r.infinite_frames;
        else
            psnr_sum += p;
    }
    r.all_psnr_infinite = r.infinite_frames == pred.size();
    const std::size_t finite = pred.size() - r.infinite_frames;
    r.psnr_db = finite ? psnr_sum / double(finite) : std::numeric_limits<double>::infinity();
    r.ssim = ssim_sum / double(pred.size());
    return r;
}

/// Line-oriented key=value rendering.
inline std::string to_key_value(const MetricReport& r)
{
    std::ostringstream os;
    os.precision(10);
    os << "psnr_db=" << (std::isinf(r.psnr_db) ? std::string("inf") : std::to_string(r.psnr_db)) << '\n';
    os << "ssim=" << r.ssim << '\n';
    os << "frames=" << r.per_frame_psnr.size() << '\n';
    os << "infinite_psnr_frames=" << r.infinite_frames << '\n';
    os << "all_psnr_infinite=" << (r.all_psnr_infinite ? 1 : 0) << '\n';
    if (r.temporal_inconsistency) os << "temporal_inconsistency=" << *r.temporal_inconsistency << '\n';
    for (std::size_t i = 0; i < r.per_frame_psnr.size(); ++i) {
        os << "frame." << i << ".psnr_db="
           << (std::isinf(r.per_frame_psnr[i]) ? std::string("inf") : std::to_string(r.per_frame_psnr[i])) << '\n';
        os << "frame." << i << ".ssim=" << r.per_frame_ssim[i] << '\n';
    }
    return os.str();
}

} // namespace vsr
