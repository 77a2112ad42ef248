#pragma once

// Shared test helpers: random tensors, a central-difference gradient checker
// and the catalogue of differentiable ops/losses it is run against.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "vsr/vsr.hpp"

namespace vsr::testing {

template <typename T>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = true)
{
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<T> v(vsr::numel(shape));
    for (auto& x : v) x = T(u(rng));
    return Tensor<T>(shape, std::move(v), grad);
}

// Values bounded away from zero so kinks (relu, prelu) are never straddled.
template <typename T>
Tensor<T> away_from_zero(const Shape& shape, Rng& rng, double margin = 0.1)
{
    std::uniform_real_distribution<double> u(margin, 1.0);
    std::bernoulli_distribution sign(0.5);
    std::vector<T> v(vsr::numel(shape));
    for (auto& x : v) x = T(sign(rng) ? u(rng) : -u(rng));
    return Tensor<T>(shape, std::move(v), true);
}

// Distinct values spaced by `gap` so max-pool winners never tie.
template <typename T>
Tensor<T> distinct_values(const Shape& shape, Rng& rng, double gap = 0.05)
{
    std::vector<T> v(vsr::numel(shape));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = T(gap * double(i) - gap * double(v.size()) / 2);
    std::shuffle(v.begin(), v.end(), rng);
    return Tensor<T>(shape, std::move(v), true);
}

template <typename T>
Image random_image(std::size_t c, std::size_t h, std::size_t w, Rng& rng)
{
    Image img(c, h, w);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (auto& v : img.data) v = u(rng);
    return img;
}

/// Float gradients must match within 1e-3 and double within 1e-5.
template <typename T>
constexpr double grad_tolerance()
{
    return std::is_same_v<T, float> ? 1e-3 : 1e-5;
}

template <typename T>
using TensorFn = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

struct GradCheck {
    double worst = 0.0; // largest relative error over inputs
    std::string worst_input;
};

template <typename T>
Tensor<double> to_double(const Tensor<T>& t)
{
    std::vector<double> v(t.data().begin(), t.data().end());
    return Tensor<double>(t.shape(), std::move(v), t.requires_grad());
}

/// Compares reverse-mode gradients of sum(f(x) * R) (R a fixed random
/// projection, so non-scalar outputs are covered) with central differences.
/// The differences are taken on `f_ref`, the double-precision instance of the
/// same function, with a small step so kinks are rarely straddled and float
/// round-off does not pollute the reference.
/// Error per input = |g - g_fd| / max(|g|, |g_fd|, floor) in L2.
template <typename T>
GradCheck check_gradients(const TensorFn<T>& f, const TensorFn<double>& f_ref, std::vector<Tensor<T>> inputs, Rng& rng,
                          double eps = 1e-6)
{
    auto shape = f(inputs).shape();
    auto proj = random_tensor<double>(shape, rng, 0.5, 1.5, false);
    Tensor<T> proj_t(shape, std::vector<T>(proj.data().begin(), proj.data().end()));

    for (auto& x : inputs) x.zero_grad();
    {
        auto y = f(inputs);
        backward(y.rank() == 0 ? y : sum(mul(y, proj_t)));
    }

    std::vector<Tensor<double>> ref;
    for (const auto& x : inputs) ref.push_back(to_double(x));
    auto objective = [&] {
        auto y = f_ref(ref);
        return double((y.rank() == 0 ? y : sum(mul(y, proj))).item());
    };

    struct Norms {
        double diff = 0.0, analytic = 0.0, numeric = 0.0;
    };
    std::vector<Norms> norms(inputs.size());
    double largest = 0.0;
    NoGradGuard ng;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        if (!inputs[k].requires_grad()) continue;
        auto data = ref[k].data();
        auto& n = norms[k];
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + eps;
            const double up = objective();
            data[i] = saved - eps;
            const double down = objective();
            data[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double analytic = inputs[k].has_grad() ? double(inputs[k].grad()[i]) : 0.0;
            n.diff += (analytic - numeric) * (analytic - numeric);
            n.analytic += analytic * analytic;
            n.numeric += numeric * numeric;
        }
        largest = std::max({largest, std::sqrt(n.analytic), std::sqrt(n.numeric)});
    }
    // Inputs whose true gradient is (near) zero, e.g. a conv bias feeding
    // batch norm, are judged against 1% of the largest gradient in the check.
    const double floor = std::max(1e-2 * largest, 1e-12);
    GradCheck out;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        if (!inputs[k].requires_grad()) continue;
        const auto& n = norms[k];
        const double err = std::sqrt(n.diff) / std::max({std::sqrt(n.analytic), std::sqrt(n.numeric), floor});
        if (err > out.worst) {
            out.worst = err;
            out.worst_input = "input " + std::to_string(k);
        }
    }
    return out;
}

/// Runs one catalogue case over `seeds` seeded draws; returns the worst error.
template <typename T>
double run_case(std::size_t index, std::size_t seeds, std::uint64_t base_seed = 1000);

template <typename T>
struct GradCase {
    std::string name;
    std::function<std::vector<Tensor<T>>(Rng&)> inputs;
    TensorFn<T> fn;
};

template <typename T>
FeatureFn<T> tiny_features()
{
    static const FeatureNetConfig cfg{{3, 4}};
    static const ParamSet<T> p = init_feature_net<T>(cfg, 11);
    return [](const Tensor<T>& x) { return feature_extract(x, cfg, p); };
}

/// Every differentiable op and loss, each with a seeded input builder.
template <typename T>
std::vector<GradCase<T>> gradient_cases()
{
    using V = std::vector<Tensor<T>>;
    std::vector<GradCase<T>> c;
    auto rt = [](Shape s, Rng& r, double lo = -1.0, double hi = 1.0) { return random_tensor<T>(s, r, lo, hi); };

    c.push_back({"tanh", [=](Rng& r) { return V{rt({2, 5}, r, -2, 2)}; }, [](const V& x) { return tanh(x[0]); }});
    c.push_back({"sigmoid", [=](Rng& r) { return V{rt({3, 4}, r, -3, 3)}; }, [](const V& x) { return sigmoid(x[0]); }});
    c.push_back({"relu", [](Rng& r) { return V{away_from_zero<T>({4, 4}, r)}; }, [](const V& x) { return relu(x[0]); }});
    c.push_back({"leaky_relu", [](Rng& r) { return V{away_from_zero<T>({4, 4}, r)}; },
                 [](const V& x) { return leaky_relu(x[0], 0.2); }});
    c.push_back({"scale", [=](Rng& r) { return V{rt({6}, r)}; }, [](const V& x) { return scale(x[0], -1.7); }});
    c.push_back({"add_scalar", [=](Rng& r) { return V{rt({6}, r)}; }, [](const V& x) { return add_scalar(x[0], 0.3); }});
    c.push_back({"add", [=](Rng& r) { return V{rt({2, 3}, r), rt({2, 3}, r)}; },
                 [](const V& x) { return add(x[0], x[1]); }});
    c.push_back({"sub", [=](Rng& r) { return V{rt({2, 3}, r), rt({2, 3}, r)}; },
                 [](const V& x) { return sub(x[0], x[1]); }});
    c.push_back({"mul", [=](Rng& r) { return V{rt({2, 3}, r), rt({2, 3}, r)}; },
                 [](const V& x) { return mul(x[0], x[1]); }});
    c.push_back({"sum", [=](Rng& r) { return V{rt({3, 3}, r)}; }, [](const V& x) { return sum(x[0]); }});
    c.push_back({"mean", [=](Rng& r) { return V{rt({3, 3}, r)}; }, [](const V& x) { return mean(x[0]); }});
    c.push_back({"mse", [=](Rng& r) { return V{rt({2, 4}, r), rt({2, 4}, r)}; },
                 [](const V& x) { return mse(x[0], x[1]); }});
    c.push_back({"reshape", [=](Rng& r) { return V{rt({2, 6}, r)}; }, [](const V& x) { return reshape(x[0], {3, 4}); }});
    c.push_back({"narrow", [=](Rng& r) { return V{rt({2, 5, 3}, r)}; }, [](const V& x) { return narrow(x[0], 1, 1, 3); }});
    c.push_back({"pixel_shuffle", [=](Rng& r) { return V{rt({1, 8, 2, 3}, r)}; },
                 [](const V& x) { return pixel_shuffle(x[0], 2); }});
    c.push_back({"pixel_unshuffle", [=](Rng& r) { return V{rt({1, 2, 4, 6}, r)}; },
                 [](const V& x) { return pixel_unshuffle(x[0], 2); }});
    c.push_back({"conv2d", [=](Rng& r) { return V{rt({2, 2, 5, 5}, r), rt({3, 2, 3, 3}, r), rt({3}, r)}; },
                 [](const V& x) { return conv2d(x[0], x[1], x[2], 1, 1); }});
    c.push_back({"conv2d_strided", [=](Rng& r) { return V{rt({1, 2, 6, 6}, r), rt({2, 2, 4, 4}, r), rt({2}, r)}; },
                 [](const V& x) { return conv2d(x[0], x[1], x[2], 2, 1); }});
    c.push_back({"linear", [=](Rng& r) { return V{rt({3, 4}, r), rt({5, 4}, r), rt({5}, r)}; },
                 [](const V& x) { return linear(x[0], x[1], x[2]); }});
    c.push_back({"prelu", [=](Rng& r) { return V{away_from_zero<T>({2, 3, 2, 2}, r), rt({3}, r, 0.1, 0.5)}; },
                 [](const V& x) { return prelu(x[0], x[1]); }});
    c.push_back({"prelu_shared", [=](Rng& r) { return V{away_from_zero<T>({2, 3, 2, 2}, r), rt({1}, r, 0.1, 0.5)}; },
                 [](const V& x) { return prelu(x[0], x[1]); }});
    c.push_back({"batchnorm2d", [=](Rng& r) { return V{rt({3, 2, 3, 3}, r), rt({2}, r, 0.5, 1.5), rt({2}, r)}; },
                 [](const V& x) {
                     Tensor<T> rm = Tensor<T>::zeros({2}), rv = Tensor<T>::full({2}, T(1));
                     return batchnorm2d(x[0], x[1], x[2], rm, rv, Mode::train);
                 }});
    c.push_back({"max_pool2d", [](Rng& r) { return V{distinct_values<T>({1, 2, 4, 4}, r)}; },
                 [](const V& x) { return max_pool2d(x[0], 2); }});
    c.push_back({"global_avg_pool", [=](Rng& r) { return V{rt({2, 3, 3, 2}, r)}; },
                 [](const V& x) { return global_avg_pool(x[0]); }});
    c.push_back({"dropout", [=](Rng& r) { return V{rt({4, 5}, r)}; },
                 [](const V& x) {
                     Rng mask(17);
                     return dropout(x[0], 0.4, Mode::train, mask);
                 }});
    c.push_back({"lstm_sequence",
                 [=](Rng& r) {
                     return V{rt({2, 3, 4}, r), rt({12, 4}, r, -0.5, 0.5), rt({12, 3}, r, -0.5, 0.5), rt({12}, r),
                              rt({12}, r)};
                 },
                 [](const V& x) { return lstm_sequence(x[0], LstmWeights<T>{x[1], x[2], x[3], x[4]}); }});

    // Losses.
    c.push_back({"adversarial_loss", [=](Rng& r) { return V{rt({4}, r, 0.05, 0.95)}; },
                 [](const V& x) { return adversarial_loss(x[0]); }});
    c.push_back({"discriminator_loss", [=](Rng& r) { return V{rt({3}, r, 0.05, 0.95), rt({3}, r, 0.05, 0.95)}; },
                 [](const V& x) { return discriminator_loss(x[0], x[1]); }});
    c.push_back({"image_loss", [=](Rng& r) { return V{rt({1, 3, 4, 4}, r, 0, 1), rt({1, 3, 4, 4}, r, 0, 1)}; },
                 [](const V& x) { return image_loss(x[0], x[1]); }});
    c.push_back({"perceptual_loss", [=](Rng& r) { return V{rt({1, 3, 8, 8}, r, 0, 1), rt({1, 3, 8, 8}, r, 0, 1)}; },
                 [](const V& x) { return perceptual_loss(x[0], x[1], tiny_features<T>()); }});
    c.push_back({"tv_loss", [=](Rng& r) { return V{rt({2, 3, 4, 5}, r, 0, 1)}; },
                 [](const V& x) { return tv_loss(x[0]); }});
    c.push_back({"temporal_consistency_loss",
                 [=](Rng& r) {
                     return V{rt({1, 3, 4, 4}, r, 0, 1), rt({1, 3, 4, 4}, r, 0, 1), rt({1, 3, 4, 4}, r, 0, 1),
                              rt({1, 3, 4, 4}, r, 0, 1)};
                 },
                 [](const V& x) { return temporal_consistency_loss(x[0], x[1], x[2], x[3]); }});
    c.push_back({"generator_total_loss",
                 [=](Rng& r) {
                     return V{rt({2}, r, 0.05, 0.95), rt({1, 3, 3, 8, 8}, r, 0, 1), rt({1, 3, 3, 8, 8}, r, 0, 1)};
                 },
                 [](const V& x) {
                     // Weights scaled so every term moves the total visibly.
                     LossWeights w{1.0, 0.5, 0.6, 0.2, 0.7};
                     return generator_total_loss(x[0], x[1], x[2], w, tiny_features<T>()).total;
                 }});
    return c;
}

/// Tiny generator used for end-to-end gradient checks.
inline GeneratorConfig tiny_generator_config()
{
    GeneratorConfig g;
    g.scale_factor = 2;
    g.sequence_length = 2;
    g.base_channels = 2;
    g.lstm_hidden = 3;
    g.lr_height = g.lr_width = 8;
    g.residual_blocks = 1;
    return g;
}

/// Worst relative error of d mean(G(x)) / d theta over all generator
/// parameters. Train-mode BN keeps the mapping smooth in every parameter.
template <typename T>
GradCheck generator_gradient_check(std::uint64_t seed)
{
    const auto cfg = tiny_generator_config();
    const auto params = init_generator<T>(cfg, seed);
    const auto params_ref = init_generator<double>(cfg, seed);
    Rng rng(seed + 1);
    auto x = random_tensor<T>({1, 2, 3, 8, 8}, rng, 0, 1, false);
    auto x_ref = to_double(x);
    std::vector<Tensor<T>> inputs;
    for (const auto& [name, t] : params)
        if (t.requires_grad()) inputs.push_back(t);

    auto make_fn = [&cfg](const auto& base, const auto& input) {
        using U = typename std::decay_t<decltype(input)>::value_type;
        return TensorFn<U>([&base, &input, &cfg](const std::vector<Tensor<U>>& in) {
            ParamSet<U> p;
            std::size_t k = 0;
            for (const auto& [name, t] : base) {
                if (t.requires_grad())
                    p.add(name, in[k++]);
                else
                    p.add(name, t.clone());
            }
            return mean(generator_forward(input, cfg, p, Mode::train));
        });
    };
    return check_gradients<T>(make_fn(params, x), make_fn(params_ref, x_ref), inputs, rng);
}

template <typename T>
double run_case(std::size_t index, std::size_t seeds, std::uint64_t base_seed)
{
    const auto cases = gradient_cases<T>();
    const auto ref = gradient_cases<double>();
    double worst = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) {
        Rng rng(base_seed + s);
        auto inputs = cases[index].inputs(rng);
        worst = std::max(worst, check_gradients<T>(cases[index].fn, ref[index].fn, inputs, rng).worst);
    }
    return worst;
}

// Direct per-pixel reference implementations of the image metrics.
inline double naive_psnr(const Image& a, const Image& b)
{
    double acc = 0.0;
    for (std::size_t c = 0; c < a.channels; ++c)
        for (std::size_t y = 0; y < a.height; ++y)
            for (std::size_t x = 0; x < a.width; ++x) {
                const double d = double(a.at(c, y, x)) - double(b.at(c, y, x));
                acc += d * d;
            }
    const double err = acc / double(a.channels * a.height * a.width);
    return 10.0 * std::log10(1.0 / err);
}

inline double naive_ssim(const Image& a, const Image& b)
{
    const int k = 11, r = 5;
    const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double w[11][11], norm = 0.0;
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) norm += w[i][j] = std::exp(-((i - r) * (i - r) + (j - r) * (j - r)) / (2 * sigma * sigma));
    double total = 0.0;
    for (std::size_t c = 0; c < a.channels; ++c) {
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t y = r; y + r < a.height; ++y)
            for (std::size_t x = r; x + r < a.width; ++x) {
                double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
                for (int i = 0; i < k; ++i)
                    for (int j = 0; j < k; ++j) {
                        const double g = w[i][j] / norm;
                        const double u = a.at(c, y + i - r, x + j - r), v = b.at(c, y + i - r, x + j - r);
                        mx += g * u;
                        my += g * v;
                        sxx += g * u * u;
                        syy += g * v * v;
                        sxy += g * u * v;
                    }
                const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
                sum += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++count;
            }
        total += sum / double(count);
    }
    return total / double(a.channels);
}

} // namespace vsr::testing
