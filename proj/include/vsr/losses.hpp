#pragma once

// Combined generator objective (image, adversarial, perceptual, total
// variation, temporal consistency) and the discriminator objective.

#include <functional>

#include "vsr/ops.hpp"

namespace vsr {

struct LossWeights {
    double image = 1.0;
    double adversarial = 0.001;
    double perceptual = 0.006;
    double tv = 2e-8;
    double temporal = 0.1;

    void validate() const
    {
        for (double w : {image, adversarial, perceptual, tv, temporal})
            if (!(w >= 0.0)) throw ContractError("loss weights must be non-negative");
    }
};

struct LossBreakdown {
    double adversarial = 0.0;
    double perceptual = 0.0;
    double image = 0.0;
    double tv = 0.0;
    double temporal = 0.0;
    double total = 0.0;
};

/// Weighted sum in the same order and precision as generator_total_loss.
template <typename T = double>
T combine_components(const LossBreakdown& c, const LossWeights& w)
{
    T acc = T(c.image) * T(w.image);
    acc = acc + T(c.adversarial) * T(w.adversarial);
    acc = acc + T(c.perceptual) * T(w.perceptual);
    acc = acc + T(c.tv) * T(w.tv);
    acc = acc + T(c.temporal) * T(w.temporal);
    return acc;
}

template <typename T>
using FeatureFn = std::function<Tensor<T>(const Tensor<T>&)>;

/// mean(1 - D(fake))
template <typename T>
Tensor<T> adversarial_loss(const Tensor<T>& d_fake)
{
    if (!d_fake.defined() || d_fake.numel() == 0) throw ContractError("adversarial_loss: empty batch");
    return add_scalar(scale(mean(d_fake), -1.0), 1.0);
}

template <typename T>
Tensor<T> image_loss(const Tensor<T>& out, const Tensor<T>& target)
{
    return mse(out, target);
}

template <typename T>
Tensor<T> perceptual_loss(const Tensor<T>& out, const Tensor<T>& target, const FeatureFn<T>& features)
{
    detail::require_same_shape(out, target, "perceptual_loss");
    return mse(features(out), features(target));
}

/// Anisotropic squared total variation:
///   (sum dv^2 / count_v + sum dh^2 / count_h) * 2 / B
/// A direction with a single row or column has no difference terms and
/// contributes zero.
template <typename T>
Tensor<T> tv_loss(const Tensor<T>& out)
{
    detail::require_rank(out, 4, "tv_loss");
    const std::size_t b = out.dim(0), h = out.dim(2), w = out.dim(3);
    if (h < 2 && w < 2) throw ShapeError("tv_loss: image has no neighbouring pixels");
    Tensor<T> acc = Tensor<T>::scalar(T(0));
    if (h >= 2) acc = add(acc, mse(narrow(out, 2, 1, h - 1), narrow(out, 2, 0, h - 1)));
    if (w >= 2) acc = add(acc, mse(narrow(out, 3, 1, w - 1), narrow(out, 3, 0, w - 1)));
    return scale(acc, 2.0 / double(b));
}

/// mse(out_t - out_prev, target_t - target_prev); zero when the previous pair
/// is absent (undefined tensors).
template <typename T>
Tensor<T> temporal_consistency_loss(const Tensor<T>& out_t, const Tensor<T>& out_prev, const Tensor<T>& target_t,
                                    const Tensor<T>& target_prev)
{
    if (out_prev.defined() != target_prev.defined())
        throw ContractError("temporal_consistency_loss: previous output and target must be given together");
    if (!out_prev.defined()) return Tensor<T>::scalar(T(0));
    detail::require_same_shape(out_t, out_prev, "temporal_consistency_loss");
    detail::require_same_shape(target_t, target_prev, "temporal_consistency_loss");
    return mse(sub(out_t, out_prev), sub(target_t, target_prev));
}

/// 1 - mean(D(real)) + mean(D(fake)); real labelled 1, fake 0.
template <typename T>
Tensor<T> discriminator_loss(const Tensor<T>& d_real, const Tensor<T>& d_fake)
{
    if (!d_real.defined() || !d_fake.defined() || d_real.numel() == 0 || d_fake.numel() == 0)
        throw ContractError("discriminator_loss: empty batch");
    return add(add_scalar(scale(mean(d_real), -1.0), 1.0), mean(d_fake));
}

template <typename T>
struct GeneratorLoss {
    Tensor<T> total;
    LossBreakdown parts;
};

namespace detail {

template <typename T>
Tensor<T> frame(const Tensor<T>& seq, std::size_t t)
{
    return reshape(narrow(seq, 1, t, 1), {seq.dim(0), seq.dim(2), seq.dim(3), seq.dim(4)});
}

} // namespace detail

/// Per-frame terms averaged over the sequence; the temporal term pairs each
/// frame t >= 1 with t-1 and is averaged over those pairs. With
/// `temporal_enabled` false the temporal component is exactly zero.
template <typename T>
GeneratorLoss<T> generator_total_loss(const Tensor<T>& d_fake, const Tensor<T>& out_seq, const Tensor<T>& target_seq,
                                      const LossWeights& weights, const FeatureFn<T>& features,
                                      bool temporal_enabled = true)
{
    weights.validate();
    if (out_seq.rank() != 5) throw ShapeError("generator_total_loss: expected [B,T,C,H,W] sequences");
    if (out_seq.shape() != target_seq.shape())
        throw ShapeError("generator_total_loss: output " + to_string(out_seq.shape()) + " vs target " +
                         to_string(target_seq.shape()));
    const std::size_t steps = out_seq.dim(1);
    const double inv_steps = 1.0 / double(steps);

    auto zero = Tensor<T>::scalar(T(0));
    Tensor<T> image = zero, perc = zero, tv = zero, temporal = zero;
    Tensor<T> prev_out, prev_target;
    for (std::size_t t = 0; t < steps; ++t) {
        auto o = detail::frame(out_seq, t);
        auto g = detail::frame(target_seq, t);
        image = add(image, image_loss(o, g));
        perc = add(perc, perceptual_loss(o, g, features));
        tv = add(tv, tv_loss(o));
        if (temporal_enabled && t > 0) temporal = add(temporal, temporal_consistency_loss(o, prev_out, g, prev_target));
        prev_out = o;
        prev_target = g;
    }
    image = scale(image, inv_steps);
    perc = scale(perc, inv_steps);
    tv = scale(tv, inv_steps);
    if (temporal_enabled && steps > 1) temporal = scale(temporal, 1.0 / double(steps - 1));
    auto adv = adversarial_loss(d_fake);

    auto total = scale(image, weights.image);
    total = add(total, scale(adv, weights.adversarial));
    total = add(total, scale(perc, weights.perceptual));
    total = add(total, scale(tv, weights.tv));
    total = add(total, scale(temporal, weights.temporal));

    LossBreakdown parts;
    parts.image = double(image.item());
    parts.adversarial = double(adv.item());
    parts.perceptual = double(perc.item());
    parts.tv = double(tv.item());
    parts.temporal = double(temporal.item());
    parts.total = double(total.item());
    return {total, parts};
}

} // namespace vsr
