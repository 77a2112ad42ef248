#pragma once

// Generator (residual trunk -> LSTM over per-frame features -> sub-pixel
// upsampler), SRGAN-style discriminator, and the frozen feature network used
// by the perceptual loss.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vsr/ops.hpp"

namespace vsr {

/// Named tensors keyed by stable layer paths, ordered by name.
template <typename T>
class ParamSet {
public:
    using Map = std::map<std::string, Tensor<T>>;

    void add(const std::string& name, Tensor<T> t)
    {
        if (!entries_.emplace(name, std::move(t)).second) throw ContractError("duplicate parameter name " + name);
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    Tensor<T> operator[](const std::string& name) const
    {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ContractError("missing parameter " + name);
        return it->second;
    }

    std::vector<std::string> names() const
    {
        std::vector<std::string> out;
        for (const auto& [k, v] : entries_) out.push_back(k);
        return out;
    }

    /// Tensors the optimizer updates, in name order.
    std::vector<Tensor<T>> trainable() const
    {
        std::vector<Tensor<T>> out;
        for (const auto& [k, v] : entries_)
            if (v.requires_grad()) out.push_back(v);
        return out;
    }

    void zero_grad()
    {
        for (auto& [k, v] : entries_) v.zero_grad();
    }

    std::size_t size() const { return entries_.size(); }
    typename Map::const_iterator begin() const { return entries_.begin(); }
    typename Map::const_iterator end() const { return entries_.end(); }

private:
    Map entries_;
};

/// Bit-exact equality of names, shapes and values.
template <typename T>
bool identical(const ParamSet<T>& a, const ParamSet<T>& b)
{
    if (a.names() != b.names()) return false;
    for (const auto& [name, t] : a) {
        auto u = b[name];
        if (t.shape() != u.shape() || !std::equal(t.data().begin(), t.data().end(), u.data().begin())) return false;
    }
    return true;
}

namespace detail {

inline constexpr double kPreluInit = 0.25;
inline constexpr double kPreluGain2 = 2.0 / (1.0 + kPreluInit * kPreluInit);
inline constexpr double kReluGain2 = 2.0;
inline constexpr double kLinearGain2 = 1.0;

template <typename T>
Tensor<T> kaiming(const Shape& shape, std::size_t fan_in, double gain2, Rng& rng)
{
    std::normal_distribution<double> dist(0.0, std::sqrt(gain2 / double(fan_in)));
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = T(dist(rng));
    return Tensor<T>(shape, std::move(v), true);
}

template <typename T>
void add_conv(ParamSet<T>& p, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, double gain2,
              Rng& rng)
{
    p.add(name + ".weight", kaiming<T>({cout, cin, k, k}, cin * k * k, gain2, rng));
    p.add(name + ".bias", Tensor<T>::zeros({cout}, true));
}

template <typename T>
void add_dense(ParamSet<T>& p, const std::string& name, std::size_t in, std::size_t out, double gain2, Rng& rng)
{
    p.add(name + ".weight", kaiming<T>({out, in}, in, gain2, rng));
    p.add(name + ".bias", Tensor<T>::zeros({out}, true));
}

template <typename T>
void add_bn(ParamSet<T>& p, const std::string& name, std::size_t c)
{
    p.add(name + ".gamma", Tensor<T>::full({c}, T(1), true));
    p.add(name + ".beta", Tensor<T>::zeros({c}, true));
    p.add(name + ".running_mean", Tensor<T>::zeros({c}));
    p.add(name + ".running_var", Tensor<T>::full({c}, T(1)));
}

template <typename T>
void add_prelu(ParamSet<T>& p, const std::string& name)
{
    p.add(name, Tensor<T>::full({1}, T(kPreluInit), true));
}

template <typename T>
Tensor<T> conv(const Tensor<T>& x, const ParamSet<T>& p, const std::string& name, std::size_t stride, std::size_t pad)
{
    return conv2d(x, p[name + ".weight"], p[name + ".bias"], stride, pad);
}

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const ParamSet<T>& p, const std::string& name)
{
    return linear(x, p[name + ".weight"], p[name + ".bias"]);
}

template <typename T>
Tensor<T> bn(const Tensor<T>& x, const ParamSet<T>& p, const std::string& name, Mode mode)
{
    auto rm = p[name + ".running_mean"];
    auto rv = p[name + ".running_var"];
    return batchnorm2d(x, p[name + ".gamma"], p[name + ".beta"], rm, rv, mode);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Generator

struct GeneratorConfig {
    std::size_t scale_factor = 4;
    std::size_t sequence_length = 3;
    std::size_t base_channels = 64;
    std::size_t lstm_hidden = 256;
    std::size_t lr_height = 16;
    std::size_t lr_width = 16;
    /// Residual block count; follows sequence_length when unset.
    std::optional<std::size_t> residual_blocks;
    bool use_lstm = true;

    std::size_t residual_count() const { return residual_blocks.value_or(sequence_length); }
    std::size_t lstm_input() const { return base_channels * lr_height * lr_width; }

    std::size_t upsample_blocks() const
    {
        std::size_t n = 0;
        for (std::size_t s = scale_factor; s > 1; s /= 2) ++n;
        return n;
    }

    void validate() const
    {
        if (scale_factor != 2 && scale_factor != 4 && scale_factor != 8)
            throw ContractError("generator scale_factor must be 2, 4 or 8");
        if (sequence_length == 0 || base_channels == 0 || lstm_hidden == 0 || lr_height == 0 || lr_width == 0)
            throw ContractError("generator dimensions must be positive");
    }
};

template <typename T = float>
ParamSet<T> init_generator(const GeneratorConfig& cfg, std::uint64_t seed)
{
    cfg.validate();
    using namespace detail;
    Rng rng(seed);
    ParamSet<T> p;
    const std::size_t c = cfg.base_channels;
    add_conv(p, "conv1", 3, c, 9, kPreluGain2, rng);
    add_prelu(p, "conv1.prelu");
    for (std::size_t i = 0; i < cfg.residual_count(); ++i) {
        const std::string r = "res." + std::to_string(i);
        add_conv(p, r + ".conv1", c, c, 3, kPreluGain2, rng);
        add_bn(p, r + ".bn1", c);
        add_prelu(p, r + ".prelu");
        add_conv(p, r + ".conv2", c, c, 3, kLinearGain2, rng);
        add_bn(p, r + ".bn2", c);
    }
    add_conv(p, "conv2", c, c, 3, kLinearGain2, rng);
    add_bn(p, "bn2", c);
    if (cfg.use_lstm) {
        const std::size_t n = cfg.lstm_input(), hd = cfg.lstm_hidden;
        p.add("lstm.weight_ih", kaiming<T>({4 * hd, n}, n, kLinearGain2, rng));
        p.add("lstm.weight_hh", kaiming<T>({4 * hd, hd}, hd, kLinearGain2, rng));
        p.add("lstm.bias_ih", Tensor<T>::zeros({4 * hd}, true));
        p.add("lstm.bias_hh", Tensor<T>::zeros({4 * hd}, true));
        add_dense(p, "fc", hd, n, kLinearGain2, rng);
    }
    for (std::size_t k = 0; k < cfg.upsample_blocks(); ++k) {
        const std::string u = "up." + std::to_string(k);
        add_conv(p, u + ".conv", c, c * 4, 3, kPreluGain2, rng);
        add_prelu(p, u + ".prelu");
    }
    add_conv(p, "conv3", c, 3, 9, kLinearGain2, rng);
    return p;
}

/// seq[B,T,3,h,w] in [0,1] -> [B,T,3,s*h,s*w] in [0,1].
template <typename T>
Tensor<T> generator_forward(const Tensor<T>& seq, const GeneratorConfig& cfg, const ParamSet<T>& p, Mode mode)
{
    using namespace detail;
    if (seq.rank() != 5 || seq.dim(2) != 3)
        throw ShapeError("generator expects [B,T,3,h,w], got " + to_string(seq.shape()));
    const std::size_t b = seq.dim(0), steps = seq.dim(1), h = seq.dim(3), w = seq.dim(4);
    if (steps != cfg.sequence_length)
        throw ShapeError("generator: sequence of " + std::to_string(steps) + " frames, configured for " +
                         std::to_string(cfg.sequence_length));
    if (h != cfg.lr_height || w != cfg.lr_width)
        throw ShapeError("generator: frames are " + std::to_string(h) + "x" + std::to_string(w) + ", configured for " +
                         std::to_string(cfg.lr_height) + "x" + std::to_string(cfg.lr_width));
    const std::size_t c = cfg.base_channels;

    auto x = reshape(seq, {b * steps, 3, h, w});
    auto head = prelu(conv(x, p, "conv1", 1, 4), p["conv1.prelu"]);
    auto trunk = head;
    for (std::size_t i = 0; i < cfg.residual_count(); ++i) {
        const std::string r = "res." + std::to_string(i);
        auto y = prelu(bn(conv(trunk, p, r + ".conv1", 1, 1), p, r + ".bn1", mode), p[r + ".prelu"]);
        y = bn(conv(y, p, r + ".conv2", 1, 1), p, r + ".bn2", mode);
        trunk = add(trunk, y);
    }
    auto feat = add(head, bn(conv(trunk, p, "conv2", 1, 1), p, "bn2", mode));

    if (cfg.use_lstm) {
        LstmWeights<T> lw{p["lstm.weight_ih"], p["lstm.weight_hh"], p["lstm.bias_ih"], p["lstm.bias_hh"]};
        auto hs = lstm_sequence(reshape(feat, {b, steps, c * h * w}), lw);
        auto fc = dense(reshape(hs, {b * steps, cfg.lstm_hidden}), p, "fc");
        feat = reshape(fc, {b * steps, c, h, w});
    }

    for (std::size_t k = 0; k < cfg.upsample_blocks(); ++k) {
        const std::string u = "up." + std::to_string(k);
        feat = prelu(pixel_shuffle(conv(feat, p, u + ".conv", 1, 1), 2), p[u + ".prelu"]);
    }
    auto out = conv(feat, p, "conv3", 1, 4);
    auto img = scale(add_scalar(tanh(out), 1.0), 0.5);
    const std::size_t s = cfg.scale_factor;
    return reshape(img, {b, steps, 3, s * h, s * w});
}

// ---------------------------------------------------------------------------
// Discriminator

struct DiscriminatorConfig {
    std::vector<std::size_t> channels{64, 64, 128, 128, 256, 256, 512, 512};
    std::size_t dense_width = 1024;
    double slope = 0.2;
    double dropout_rate = 0.0;

    /// Blocks at odd positions halve the resolution.
    static bool strided(std::size_t block) { return block % 2 == 1; }

    std::size_t downsample_factor() const
    {
        std::size_t f = 1;
        for (std::size_t i = 0; i < channels.size(); ++i)
            if (strided(i)) f *= 2;
        return f;
    }

    void validate() const
    {
        if (channels.empty()) throw ContractError("discriminator needs at least one conv block");
        if (!(slope > 0.0 && slope < 1.0)) throw ContractError("discriminator slope must lie in (0,1)");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
            throw ContractError("discriminator dropout_rate must lie in [0,1)");
    }
};

template <typename T = float>
ParamSet<T> init_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed)
{
    cfg.validate();
    using namespace detail;
    Rng rng(seed);
    ParamSet<T> p;
    const double gain2 = 2.0 / (1.0 + cfg.slope * cfg.slope);
    std::size_t cin = 3;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
        const std::string blk = "block" + std::to_string(i);
        add_conv(p, blk + ".conv", cin, cfg.channels[i], DiscriminatorConfig::strided(i) ? 4 : 3, gain2, rng);
        if (i > 0) add_bn(p, blk + ".bn", cfg.channels[i]);
        cin = cfg.channels[i];
    }
    add_dense(p, "dense1", cin, cfg.dense_width, gain2, rng);
    add_dense(p, "dense2", cfg.dense_width, 1, kLinearGain2, rng);
    return p;
}

/// img[B,3,H,W] -> realism scores [B] in (0,1). `rng` drives dropout in
/// train mode and may be null when dropout is off.
template <typename T>
Tensor<T> discriminator_forward(const Tensor<T>& img, const DiscriminatorConfig& cfg, const ParamSet<T>& p, Mode mode,
                                Rng* rng = nullptr)
{
    using namespace detail;
    if (img.rank() != 4 || img.dim(1) != 3)
        throw ShapeError("discriminator expects [B,3,H,W], got " + to_string(img.shape()));
    const std::size_t f = cfg.downsample_factor();
    if (img.dim(2) < 16 || img.dim(3) < 16 || img.dim(2) % f != 0 || img.dim(3) % f != 0)
        throw ShapeError("discriminator: image " + std::to_string(img.dim(2)) + "x" + std::to_string(img.dim(3)) +
                         " unsupported by a ladder downsampling by " + std::to_string(f));
    auto x = img;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
        const std::string blk = "block" + std::to_string(i);
        x = DiscriminatorConfig::strided(i) ? conv(x, p, blk + ".conv", 2, 1) : conv(x, p, blk + ".conv", 1, 1);
        if (i > 0) x = bn(x, p, blk + ".bn", mode);
        x = leaky_relu(x, cfg.slope);
    }
    if (mode == Mode::train && cfg.dropout_rate > 0.0) {
        if (!rng) throw ContractError("discriminator dropout in train mode needs an rng");
        x = dropout(x, cfg.dropout_rate, mode, *rng);
    }
    auto pooled = global_avg_pool(x);
    auto hidden = leaky_relu(dense(pooled, p, "dense1"), cfg.slope);
    auto logit = dense(hidden, p, "dense2");
    return reshape(sigmoid(logit), {img.dim(0)});
}

// ---------------------------------------------------------------------------
// Feature network (perceptual loss)

struct FeatureNetConfig {
    std::vector<std::size_t> channels{16, 32, 64, 64};
    static constexpr std::uint64_t default_seed = 0x5eed'f00dULL;
};

/// Deterministic stand-in for pretrained perceptual weights. All tensors frozen.
template <typename T = float>
ParamSet<T> init_feature_net(const FeatureNetConfig& cfg = {}, std::uint64_t seed = FeatureNetConfig::default_seed)
{
    using namespace detail;
    Rng rng(seed);
    ParamSet<T> p;
    std::size_t cin = 3;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
        add_conv(p, "stage" + std::to_string(i) + ".conv", cin, cfg.channels[i], 3, kReluGain2, rng);
        cin = cfg.channels[i];
    }
    for (const auto& [name, t] : p) {
        auto handle = t;
        handle.set_requires_grad(false);
    }
    return p;
}

/// conv3x3 / ReLU / max-pool per stage.
template <typename T>
Tensor<T> feature_extract(const Tensor<T>& img, const FeatureNetConfig& cfg, const ParamSet<T>& p)
{
    if (img.rank() != 4 || img.dim(1) != 3)
        throw ShapeError("feature_extract expects [B,3,H,W], got " + to_string(img.shape()));
    auto x = img;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i)
        x = max_pool2d(relu(detail::conv(x, p, "stage" + std::to_string(i) + ".conv", 1, 1)), 2);
    return x;
}

} // namespace vsr
