#pragma once

// Differentiable operations over Tensor<T>.
//
// Layout is row-major NCHW throughout. No implicit broadcasting: elementwise
// binary ops require equal shapes; scalars enter through scale()/add_scalar().

#include <Eigen/Core>

#include "vsr/tensor.hpp"

namespace vsr {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[M,N] = alpha * op(A)[M,K] * op(B)[K,N] + beta * C, all row-major.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a, const T* b,
          T beta, T* c)
{
    using Map = Eigen::Map<const RowMat<T>>;
    Map ma(a, trans_a ? k : m, trans_a ? m : k);
    Map mb(b, trans_b ? n : k, trans_b ? k : n);
    Eigen::Map<RowMat<T>> mc(c, m, n);
    auto run = [&](const auto& lhs, const auto& rhs) {
        if (beta == T(0)) {
            mc.noalias() = alpha * (lhs * rhs);
        } else {
            if (beta != T(1)) mc *= beta;
            mc.noalias() += alpha * (lhs * rhs);
        }
    };
    if (!trans_a && !trans_b)
        run(ma, mb);
    else if (trans_a && !trans_b)
        run(ma.transpose(), mb);
    else if (!trans_a && trans_b)
        run(ma, mb.transpose());
    else
        run(ma.transpose(), mb.transpose());
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op)
{
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op)
{
    if (x.rank() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(x.shape()));
}

// Elementwise unary op: forward value f(x), local derivative df(x, y).
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df, const char* op)
{
    std::vector<T> out(x.numel());
    auto xs = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xs[i]);
    auto xn = x.node();
    return make_result<T>(
        x.shape(), std::move(out), {xn},
        [xn, df](Node<T>& o) {
            if (!xn->requires_grad) return;
            auto& g = xn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * df(xn->data[i], o.data[i]);
        },
        op);
}

// Output element i copies input element index[i]; backward scatters.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape shape, std::vector<std::size_t> index, const char* op)
{
    std::vector<T> out(index.size());
    auto xs = x.data();
    for (std::size_t i = 0; i < index.size(); ++i) out[i] = xs[index[i]];
    auto xn = x.node();
    return make_result<T>(
        std::move(shape), std::move(out), {xn},
        [xn, index = std::move(index)](Node<T>& o) {
            if (!xn->requires_grad) return;
            auto& g = xn->grad_buffer();
            for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += o.grad[i];
        },
        op);
}

template <typename T>
void im2col(const T* img, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, T* cols)
{
    const std::size_t plane = oh * ow;
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t ki = 0; ki < kh; ++ki)
            for (std::size_t kj = 0; kj < kw; ++kj) {
                T* row = cols + ((c * kh + ki) * kw + kj) * plane;
                const T* src = img + c * h * w;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const long iy = long(oy * stride + ki) - long(pad);
                    T* dst = row + oy * ow;
                    if (iy < 0 || iy >= long(h)) {
                        std::fill(dst, dst + ow, T(0));
                        continue;
                    }
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const long ix = long(ox * stride + kj) - long(pad);
                        dst[ox] = (ix < 0 || ix >= long(w)) ? T(0) : src[iy * long(w) + ix];
                    }
                }
            }
}

template <typename T>
void col2im_add(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, T* img)
{
    const std::size_t plane = oh * ow;
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t ki = 0; ki < kh; ++ki)
            for (std::size_t kj = 0; kj < kw; ++kj) {
                const T* row = cols + ((c * kh + ki) * kw + kj) * plane;
                T* dst = img + c * h * w;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const long iy = long(oy * stride + ki) - long(pad);
                    if (iy < 0 || iy >= long(h)) continue;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const long ix = long(ox * stride + kj) - long(pad);
                        if (ix >= 0 && ix < long(w)) dst[iy * long(w) + ix] += row[oy * ow + ox];
                    }
                }
            }
}

template <typename T>
T sigmoid_value(T v)
{
    return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Pointwise and reductions

template <typename T>
Tensor<T> tanh(const Tensor<T>& x)
{
    return detail::unary<T>(
        x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; }, "tanh");
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x)
{
    return detail::unary<T>(
        x, [](T v) { return detail::sigmoid_value(v); }, [](T, T y) { return y * (T(1) - y); }, "sigmoid");
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x)
{
    return detail::unary<T>(
        x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); }, "relu");
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope)
{
    if (!(slope > 0.0 && slope < 1.0)) throw ContractError("leaky_relu: slope must lie in (0,1)");
    const T s = T(slope);
    return detail::unary<T>(
        x, [s](T v) { return v >= T(0) ? v : s * v; }, [s](T v, T) { return v >= T(0) ? T(1) : s; }, "leaky_relu");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double k)
{
    const T kk = T(k);
    return detail::unary<T>(
        x, [kk](T v) { return v * kk; }, [kk](T, T) { return kk; }, "scale");
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, double k)
{
    const T kk = T(k);
    return detail::unary<T>(
        x, [kk](T v) { return v + kk; }, [](T, T) { return T(1); }, "add_scalar");
}

namespace detail {

template <typename T>
Tensor<T> binary_linear(const Tensor<T>& a, const Tensor<T>& b, T sign_b, const char* op)
{
    require_same_shape(a, b, op);
    std::vector<T> out(a.numel());
    auto as = a.data();
    auto bs = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] + sign_b * bs[i];
    auto an = a.node();
    auto bn = b.node();
    return make_result<T>(
        a.shape(), std::move(out), {an, bn},
        [an, bn, sign_b](Node<T>& o) {
            if (an->requires_grad) {
                auto& g = an->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
            }
            if (bn->requires_grad) {
                auto& g = bn->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign_b * o.grad[i];
            }
        },
        op);
}

} // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b)
{
    return detail::binary_linear(a, b, T(1), "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b)
{
    return detail::binary_linear(a, b, T(-1), "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b)
{
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<T>(
        a.shape(), std::move(out), {an, bn},
        [an, bn](detail::Node<T>& o) {
            if (an->requires_grad) {
                auto& g = an->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                auto& g = bn->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * an->data[i];
            }
        },
        "mul");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x)
{
    T acc = T(0);
    for (T v : x.data()) acc += v;
    auto xn = x.node();
    return detail::make_result<T>(
        {}, {acc}, {xn},
        [xn](detail::Node<T>& o) {
            if (!xn->requires_grad) return;
            auto& g = xn->grad_buffer();
            for (auto& v : g) v += o.grad[0];
        },
        "sum");
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x)
{
    T acc = T(0);
    for (T v : x.data()) acc += v;
    const T inv = T(1) / T(x.numel());
    auto xn = x.node();
    return detail::make_result<T>(
        {}, {acc * inv}, {xn},
        [xn, inv](detail::Node<T>& o) {
            if (!xn->requires_grad) return;
            auto& g = xn->grad_buffer();
            for (auto& v : g) v += o.grad[0] * inv;
        },
        "mean");
}

/// mean((a - b)^2) over all elements.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b)
{
    detail::require_same_shape(a, b, "mse");
    T acc = T(0);
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const T d = a[i] - b[i];
        acc += d * d;
    }
    const T inv = T(1) / T(a.numel());
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<T>(
        {}, {acc * inv}, {an, bn},
        [an, bn, inv](detail::Node<T>& o) {
            const T k = T(2) * inv * o.grad[0];
            if (an->requires_grad) {
                auto& g = an->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * (an->data[i] - bn->data[i]);
            }
            if (bn->requires_grad) {
                auto& g = bn->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= k * (an->data[i] - bn->data[i]);
            }
        },
        "mse");
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape)
{
    if (numel(shape) != x.numel())
        throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
    auto xn = x.node();
    return detail::make_result<T>(
        std::move(shape), xn->data, {xn},
        [xn](detail::Node<T>& o) {
            if (!xn->requires_grad) return;
            auto& g = xn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        },
        "reshape");
}

/// Slice [start, start+length) along one dimension.
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t dim, std::size_t start, std::size_t length)
{
    if (dim >= x.rank() || length == 0 || start + length > x.dim(dim))
        throw ShapeError("narrow: range out of bounds for " + to_string(x.shape()));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < dim; ++i) outer *= x.dim(i);
    for (std::size_t i = dim + 1; i < x.rank(); ++i) inner *= x.dim(i);
    Shape shape = x.shape();
    shape[dim] = length;
    std::vector<std::size_t> index;
    index.reserve(outer * length * inner);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t l = 0; l < length; ++l)
            for (std::size_t i = 0; i < inner; ++i) index.push_back((o * x.dim(dim) + start + l) * inner + i);
    return detail::gather(x, std::move(shape), std::move(index), "narrow");
}

/// out(b, c, r*i+di, r*j+dj) = in(b, c*r*r + di*r + dj, i, j)
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r)
{
    detail::require_rank(x, 4, "pixel_shuffle");
    if (r == 0 || x.dim(1) % (r * r) != 0)
        throw ShapeError("pixel_shuffle: channels " + std::to_string(x.dim(1)) + " not divisible by r^2 = " +
                         std::to_string(r * r));
    const std::size_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3), c = cin / (r * r);
    Shape shape{b, c, h * r, w * r};
    std::vector<std::size_t> index(x.numel());
    std::size_t k = 0;
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < h * r; ++y)
                for (std::size_t xo = 0; xo < w * r; ++xo) {
                    const std::size_t src_c = ch * r * r + (y % r) * r + (xo % r);
                    index[k++] = ((n * cin + src_c) * h + y / r) * w + xo / r;
                }
    return detail::gather(x, std::move(shape), std::move(index), "pixel_shuffle");
}

/// Inverse rearrangement of pixel_shuffle.
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r)
{
    detail::require_rank(x, 4, "pixel_unshuffle");
    if (r == 0 || x.dim(2) % r != 0 || x.dim(3) % r != 0)
        throw ShapeError("pixel_unshuffle: spatial dims not divisible by r");
    const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2) / r, w = x.dim(3) / r;
    Shape shape{b, c * r * r, h, w};
    std::vector<std::size_t> index(x.numel());
    std::size_t k = 0;
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t oc = 0; oc < c * r * r; ++oc)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) {
                    const std::size_t ch = oc / (r * r), di = (oc % (r * r)) / r, dj = oc % r;
                    index[k++] = ((n * c + ch) * h * r + i * r + di) * w * r + j * r + dj;
                }
    return detail::gather(x, std::move(shape), std::move(index), "pixel_unshuffle");
}

// ---------------------------------------------------------------------------
// Layers

/// Cross-correlation with zero padding. `bias` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride = 1,
                 std::size_t pad = 0)
{
    detail::require_rank(x, 4, "conv2d");
    detail::require_rank(weight, 4, "conv2d weight");
    const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != cin)
        throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, weight expects " +
                         std::to_string(weight.dim(1)));
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) throw ShapeError("conv2d: bias shape mismatch");
    if (h + 2 * pad < kh || w + 2 * pad < kw || (h + 2 * pad - kh) % stride != 0 ||
        (w + 2 * pad - kw) % stride != 0)
        throw ShapeError("conv2d: kernel/stride/pad do not tile input " + to_string(x.shape()));
    const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
    const std::size_t kdim = cin * kh * kw, plane = oh * ow;

    std::vector<T> out(batch * cout * plane);
    std::vector<T> cols(kdim * plane);
    for (std::size_t n = 0; n < batch; ++n) {
        detail::im2col(x.data().data() + n * cin * h * w, cin, h, w, kh, kw, stride, pad, oh, ow, cols.data());
        T* y = out.data() + n * cout * plane;
        detail::gemm<T>(false, false, cout, plane, kdim, T(1), weight.data().data(), cols.data(), T(0), y);
        if (bias.defined())
            for (std::size_t c = 0; c < cout; ++c)
                for (std::size_t p = 0; p < plane; ++p) y[c * plane + p] += bias[c];
    }

    auto xn = x.node();
    auto wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    std::vector<std::shared_ptr<detail::Node<T>>> parents{xn, wn};
    if (bn) parents.push_back(bn);
    return detail::make_result<T>(
        {batch, cout, oh, ow}, std::move(out), std::move(parents),
        [=](detail::Node<T>& o) {
            std::vector<T> cols(kdim * plane);
            for (std::size_t n = 0; n < batch; ++n) {
                const T* dy = o.grad.data() + n * cout * plane;
                if (wn->requires_grad) {
                    detail::im2col(xn->data.data() + n * cin * h * w, cin, h, w, kh, kw, stride, pad, oh, ow,
                                   cols.data());
                    detail::gemm<T>(false, true, cout, kdim, plane, T(1), dy, cols.data(), T(1),
                                    wn->grad_buffer().data());
                }
                if (xn->requires_grad) {
                    detail::gemm<T>(true, false, kdim, plane, cout, T(1), wn->data.data(), dy, T(0), cols.data());
                    detail::col2im_add(cols.data(), cin, h, w, kh, kw, stride, pad, oh, ow,
                                       xn->grad_buffer().data() + n * cin * h * w);
                }
                if (bn && bn->requires_grad) {
                    auto& g = bn->grad_buffer();
                    for (std::size_t c = 0; c < cout; ++c)
                        for (std::size_t p = 0; p < plane; ++p) g[c] += dy[c * plane + p];
                }
            }
        },
        "conv2d");
}

/// y = x * weight^T + bias for x[B,N], weight[M,N]. `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias)
{
    detail::require_rank(x, 2, "linear");
    detail::require_rank(weight, 2, "linear weight");
    const std::size_t batch = x.dim(0), n = x.dim(1), m = weight.dim(0);
    if (weight.dim(1) != n)
        throw ShapeError("linear: input width " + std::to_string(n) + " vs weight " + to_string(weight.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != m)) throw ShapeError("linear: bias shape mismatch");
    std::vector<T> out(batch * m);
    detail::gemm<T>(false, true, batch, m, n, T(1), x.data().data(), weight.data().data(), T(0), out.data());
    if (bias.defined())
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t j = 0; j < m; ++j) out[b * m + j] += bias[j];
    auto xn = x.node();
    auto wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    std::vector<std::shared_ptr<detail::Node<T>>> parents{xn, wn};
    if (bn) parents.push_back(bn);
    return detail::make_result<T>(
        {batch, m}, std::move(out), std::move(parents),
        [=](detail::Node<T>& o) {
            if (xn->requires_grad)
                detail::gemm<T>(false, false, batch, n, m, T(1), o.grad.data(), wn->data.data(), T(1),
                                xn->grad_buffer().data());
            if (wn->requires_grad)
                detail::gemm<T>(true, false, m, n, batch, T(1), o.grad.data(), xn->data.data(), T(1),
                                wn->grad_buffer().data());
            if (bn && bn->requires_grad) {
                auto& g = bn->grad_buffer();
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t j = 0; j < m; ++j) g[j] += o.grad[b * m + j];
            }
        },
        "linear");
}

/// Single-channel or per-channel (dim 1) parametric ReLU.
template <typename T>
Tensor<T> prelu(const Tensor<T>& x, const Tensor<T>& a)
{
    const std::size_t channels = a.numel();
    if (channels != 1 && (x.rank() < 2 || x.dim(1) != channels))
        throw ShapeError("prelu: slope has " + std::to_string(channels) + " entries for input " + to_string(x.shape()));
    std::size_t inner = 1;
    for (std::size_t i = 2; i < x.rank(); ++i) inner *= x.dim(i);
    auto channel_of = [channels, inner](std::size_t i) { return channels == 1 ? 0 : (i / inner) % channels; };
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] >= T(0) ? x[i] : a[channel_of(i)] * x[i];
    auto xn = x.node();
    auto an = a.node();
    return detail::make_result<T>(
        x.shape(), std::move(out), {xn, an},
        [xn, an, channel_of](detail::Node<T>& o) {
            if (xn->requires_grad) {
                auto& g = xn->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i)
                    g[i] += xn->data[i] >= T(0) ? o.grad[i] : an->data[channel_of(i)] * o.grad[i];
            }
            if (an->requires_grad) {
                auto& g = an->grad_buffer();
                for (std::size_t i = 0; i < o.grad.size(); ++i)
                    if (xn->data[i] < T(0)) g[channel_of(i)] += o.grad[i] * xn->data[i];
            }
        },
        "prelu");
}

/// Batch normalization over (B,H,W) per channel. In train mode the running
/// statistics (if defined) are updated in place with the given momentum;
/// the running variance uses the unbiased estimate.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                      Tensor<T>& running_var, Mode mode, double eps = 1e-5, double momentum = 0.1)
{
    detail::require_rank(x, 4, "batchnorm2d");
    const std::size_t batch = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    if (gamma.numel() != c || beta.numel() != c) throw ShapeError("batchnorm2d: affine parameters mismatch channels");
    const bool have_running = running_mean.defined() && running_var.defined();
    if (have_running && (running_mean.numel() != c || running_var.numel() != c))
        throw ShapeError("batchnorm2d: running statistics mismatch channels");
    if (mode == Mode::eval && !have_running)
        throw StateError("batchnorm2d: eval mode requires populated running statistics");

    const std::size_t count = batch * plane;
    std::vector<T> mean_c(c), invstd(c);
    if (mode == Mode::train) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            T s = T(0);
            for (std::size_t n = 0; n < batch; ++n)
                for (std::size_t p = 0; p < plane; ++p) s += x[(n * c + ch) * plane + p];
            const T mu = s / T(count);
            T v = T(0);
            for (std::size_t n = 0; n < batch; ++n)
                for (std::size_t p = 0; p < plane; ++p) {
                    const T d = x[(n * c + ch) * plane + p] - mu;
                    v += d * d;
                }
            const T var = v / T(count);
            mean_c[ch] = mu;
            invstd[ch] = T(1) / std::sqrt(var + T(eps));
            if (have_running) {
                const T unbiased = count > 1 ? v / T(count - 1) : var;
                running_mean.data()[ch] = T(1 - momentum) * running_mean[ch] + T(momentum) * mu;
                running_var.data()[ch] = T(1 - momentum) * running_var[ch] + T(momentum) * unbiased;
            }
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean_c[ch] = running_mean[ch];
            invstd[ch] = T(1) / std::sqrt(running_var[ch] + T(eps));
        }
    }

    std::vector<T> xhat(x.numel()), out(x.numel());
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t i = (n * c + ch) * plane + p;
                xhat[i] = (x[i] - mean_c[ch]) * invstd[ch];
                out[i] = gamma[ch] * xhat[i] + beta[ch];
            }

    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    const bool batch_stats = mode == Mode::train;
    return detail::make_result<T>(
        x.shape(), std::move(out), {xn, gn, bn},
        [=, xhat = std::move(xhat), invstd = std::move(invstd)](detail::Node<T>& o) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                T sum_dy = T(0), sum_dy_xhat = T(0);
                for (std::size_t n = 0; n < batch; ++n)
                    for (std::size_t p = 0; p < plane; ++p) {
                        const std::size_t i = (n * c + ch) * plane + p;
                        sum_dy += o.grad[i];
                        sum_dy_xhat += o.grad[i] * xhat[i];
                    }
                if (gn->requires_grad) gn->grad_buffer()[ch] += sum_dy_xhat;
                if (bn->requires_grad) bn->grad_buffer()[ch] += sum_dy;
                if (!xn->requires_grad) continue;
                auto& g = xn->grad_buffer();
                const T scale_c = gn->data[ch] * invstd[ch];
                for (std::size_t n = 0; n < batch; ++n)
                    for (std::size_t p = 0; p < plane; ++p) {
                        const std::size_t i = (n * c + ch) * plane + p;
                        if (batch_stats)
                            g[i] += scale_c * (o.grad[i] - sum_dy / T(count) - xhat[i] * sum_dy_xhat / T(count));
                        else
                            g[i] += scale_c * o.grad[i];
                    }
            }
        },
        "batchnorm2d");
}

/// Non-overlapping max pooling with window and stride `k`.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t k = 2)
{
    detail::require_rank(x, 4, "max_pool2d");
    const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (k == 0 || h < k || w < k) throw ShapeError("max_pool2d: input smaller than window");
    const std::size_t oh = h / k, ow = w / k;
    std::vector<std::size_t> index(b * c * oh * ow);
    std::size_t o = 0;
    for (std::size_t plane = 0; plane < b * c; ++plane)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                std::size_t best = (plane * h + i * k) * w + j * k;
                for (std::size_t di = 0; di < k; ++di)
                    for (std::size_t dj = 0; dj < k; ++dj) {
                        const std::size_t idx = (plane * h + i * k + di) * w + j * k + dj;
                        if (x[idx] > x[best]) best = idx;
                    }
                index[o++] = best;
            }
    return detail::gather(x, {b, c, oh, ow}, std::move(index), "max_pool2d");
}

/// Mean over the spatial dims: [B,C,H,W] -> [B,C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x)
{
    detail::require_rank(x, 4, "global_avg_pool");
    const std::size_t bc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
    std::vector<T> out(bc, T(0));
    for (std::size_t i = 0; i < bc; ++i) {
        for (std::size_t p = 0; p < plane; ++p) out[i] += x[i * plane + p];
        out[i] /= T(plane);
    }
    auto xn = x.node();
    return detail::make_result<T>(
        {x.dim(0), x.dim(1)}, std::move(out), {xn},
        [xn, bc, plane](detail::Node<T>& o) {
            if (!xn->requires_grad) return;
            auto& g = xn->grad_buffer();
            for (std::size_t i = 0; i < bc; ++i)
                for (std::size_t p = 0; p < plane; ++p) g[i * plane + p] += o.grad[i] / T(plane);
        },
        "global_avg_pool");
}

/// Inverted dropout; identity in eval mode or when rate is zero.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng)
{
    if (!(rate >= 0.0 && rate < 1.0)) throw ContractError("dropout: rate must lie in [0,1)");
    if (mode == Mode::eval || rate == 0.0) return x;
    std::bernoulli_distribution keep(1.0 - rate);
    const T k = T(1.0 / (1.0 - rate));
    std::vector<T> mask(x.numel());
    for (auto& m : mask) m = keep(rng) ? k : T(0);
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
    auto xn = x.node();
    return detail::make_result<T>(
        x.shape(), std::move(out), {xn},
        [xn, mask = std::move(mask)](detail::Node<T>& o) {
            if (!xn->requires_grad) return;
            auto& g = xn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * mask[i];
        },
        "dropout");
}

/// Parameters of a single-layer LSTM, gate order (input, forget, cell, output).
template <typename T>
struct LstmWeights {
    Tensor<T> weight_ih; // [4H, N]
    Tensor<T> weight_hh; // [4H, H]
    Tensor<T> bias_ih;   // [4H]
    Tensor<T> bias_hh;   // [4H]
};

/// Batch-first single-layer LSTM from zero initial state. x[B,T,N] -> h[B,T,H].
template <typename T>
Tensor<T> lstm_sequence(const Tensor<T>& x, const LstmWeights<T>& p)
{
    detail::require_rank(x, 3, "lstm_sequence");
    const std::size_t batch = x.dim(0), steps = x.dim(1), n = x.dim(2);
    const std::size_t hd = p.weight_hh.dim(1), g4 = 4 * hd;
    if (steps == 0) throw ShapeError("lstm_sequence: empty sequence");
    if (p.weight_ih.shape() != Shape{g4, n} || p.weight_hh.shape() != Shape{g4, hd} || p.bias_ih.numel() != g4 ||
        p.bias_hh.numel() != g4)
        throw ShapeError("lstm_sequence: weights inconsistent with input " + to_string(x.shape()));

    // Rows of `pre` are indexed by b*steps + t.
    std::vector<T> pre(batch * steps * g4);
    detail::gemm<T>(false, true, batch * steps, g4, n, T(1), x.data().data(), p.weight_ih.data().data(), T(0),
                    pre.data());
    for (std::size_t r = 0; r < batch * steps; ++r)
        for (std::size_t j = 0; j < g4; ++j) pre[r * g4 + j] += p.bias_ih[j] + p.bias_hh[j];

    // Activated gates, cell states and tanh(cell) per (b,t).
    std::vector<T> gates(batch * steps * g4), cell(batch * steps * hd), tcell(batch * steps * hd);
    std::vector<T> out(batch * steps * hd);
    std::vector<T> hprev(batch * hd, T(0)), rec(batch * g4);
    for (std::size_t t = 0; t < steps; ++t) {
        if (t > 0)
            detail::gemm<T>(false, true, batch, g4, hd, T(1), hprev.data(), p.weight_hh.data().data(), T(0),
                            rec.data());
        else
            std::fill(rec.begin(), rec.end(), T(0));
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t r = b * steps + t;
            T* gr = gates.data() + r * g4;
            for (std::size_t j = 0; j < g4; ++j) {
                const T a = pre[r * g4 + j] + rec[b * g4 + j];
                gr[j] = (j >= 2 * hd && j < 3 * hd) ? std::tanh(a) : detail::sigmoid_value(a);
            }
            for (std::size_t k = 0; k < hd; ++k) {
                const T cprev = t > 0 ? cell[(r - 1) * hd + k] : T(0);
                const T c = gr[hd + k] * cprev + gr[k] * gr[2 * hd + k];
                cell[r * hd + k] = c;
                tcell[r * hd + k] = std::tanh(c);
                out[r * hd + k] = gr[3 * hd + k] * tcell[r * hd + k];
                hprev[b * hd + k] = out[r * hd + k];
            }
        }
    }

    auto xn = x.node();
    auto wih = p.weight_ih.node();
    auto whh = p.weight_hh.node();
    auto bih = p.bias_ih.node();
    auto bhh = p.bias_hh.node();
    return detail::make_result<T>(
        {batch, steps, hd}, std::move(out), {xn, wih, whh, bih, bhh},
        [=, gates = std::move(gates), cell = std::move(cell), tcell = std::move(tcell)](detail::Node<T>& o) {
            std::vector<T> dpre(batch * steps * g4);
            std::vector<T> dh_next(batch * hd, T(0)), dc_next(batch * hd, T(0));
            std::vector<T> dgates_t(batch * g4), hprev_t(batch * hd);
            for (std::size_t t = steps; t-- > 0;) {
                for (std::size_t b = 0; b < batch; ++b) {
                    const std::size_t r = b * steps + t;
                    const T* gr = gates.data() + r * g4;
                    T* dg = dgates_t.data() + b * g4;
                    for (std::size_t k = 0; k < hd; ++k) {
                        const T ig = gr[k], fg = gr[hd + k], cg = gr[2 * hd + k], og = gr[3 * hd + k];
                        const T tc = tcell[r * hd + k];
                        const T dh = o.grad[r * hd + k] + dh_next[b * hd + k];
                        const T dc = dh * og * (T(1) - tc * tc) + dc_next[b * hd + k];
                        const T cprev = t > 0 ? cell[(r - 1) * hd + k] : T(0);
                        dg[k] = dc * cg * ig * (T(1) - ig);
                        dg[hd + k] = dc * cprev * fg * (T(1) - fg);
                        dg[2 * hd + k] = dc * ig * (T(1) - cg * cg);
                        dg[3 * hd + k] = dh * tc * og * (T(1) - og);
                        dc_next[b * hd + k] = dc * fg;
                        hprev_t[b * hd + k] = t > 0 ? o.data[(r - 1) * hd + k] : T(0);
                    }
                    std::copy(dg, dg + g4, dpre.data() + r * g4);
                }
                if (t > 0) {
                    detail::gemm<T>(false, false, batch, hd, g4, T(1), dgates_t.data(), whh->data.data(), T(0),
                                    dh_next.data());
                    if (whh->requires_grad)
                        detail::gemm<T>(true, false, g4, hd, batch, T(1), dgates_t.data(), hprev_t.data(), T(1),
                                        whh->grad_buffer().data());
                }
            }
            if (xn->requires_grad)
                detail::gemm<T>(false, false, batch * steps, n, g4, T(1), dpre.data(), wih->data.data(), T(1),
                                xn->grad_buffer().data());
            if (wih->requires_grad)
                detail::gemm<T>(true, false, g4, n, batch * steps, T(1), dpre.data(), xn->data.data(), T(1),
                                wih->grad_buffer().data());
            for (auto* bias : {bih.get(), bhh.get()}) {
                if (!bias->requires_grad) continue;
                auto& g = bias->grad_buffer();
                for (std::size_t r = 0; r < batch * steps; ++r)
                    for (std::size_t j = 0; j < g4; ++j) g[j] += dpre[r * g4 + j];
            }
        },
        "lstm_sequence");
}

} // namespace vsr
