#pragma once

#include <cmath>
#include <vector>

#include "vsr/tensor.hpp"

namespace vsr {

struct AdamOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moments are kept in double.
template <typename T>
class Adam {
public:
    Adam(std::vector<Tensor<T>> params, AdamOptions opts = {}) : params_(std::move(params)), opts_(opts)
    {
        if (!(opts_.lr > 0.0)) throw ContractError("Adam: learning rate must be positive");
        for (const auto& p : params_) {
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    void zero_grad()
    {
        for (auto& p : params_) p.zero_grad();
    }

    /// Parameters without a gradient buffer are left untouched.
    void step()
    {
        ++steps_;
        const double c1 = 1.0 - std::pow(opts_.beta1, double(steps_));
        const double c2 = 1.0 - std::pow(opts_.beta2, double(steps_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            if (!p.has_grad()) continue;
            auto g = p.grad();
            auto w = p.data();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = double(g[i]);
                m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * gi;
                v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * gi * gi;
                const double mh = m[i] / c1, vh = v[i] / c2;
                w[i] = T(double(w[i]) - opts_.lr * mh / (std::sqrt(vh) + opts_.eps));
            }
        }
    }

    std::size_t steps() const { return steps_; }

private:
    std::vector<Tensor<T>> params_;
    AdamOptions opts_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t steps_ = 0;
};

} // namespace vsr
