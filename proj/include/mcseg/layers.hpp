#pragma once

// Layer primitives for the segmentation network. Each forward has a matching
// backward that returns exact gradients of the forward map.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mcseg/errors.hpp"
#include "mcseg/tensor.hpp"

namespace mcseg {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

/// Non-owning convolution weights, layout [out][in][k][k].
template <typename T>
struct ConvView {
    std::size_t out = 0, in = 0, k = 1;
    std::span<const T> values;
};

/// Non-owning transposed-convolution weights, layout [in][out][k][k].
template <typename T>
struct DeconvView {
    std::size_t in = 0, out = 0, k = 1;
    std::span<const T> values;
};

/// Convolution weights, layout [out][in][k][k].
template <typename T>
struct ConvKernel {
    std::size_t out = 0, in = 0, k = 1;
    std::vector<T> values;

    ConvKernel() = default;
    ConvKernel(std::size_t out_, std::size_t in_, std::size_t k_, T fill = T(0))
        : out(out_), in(in_), k(k_), values(out_ * in_ * k_ * k_, fill) {}

    T& at(std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) noexcept {
        return values[((o * in + i) * k + ky) * k + kx];
    }
    ConvView<T> view() const noexcept { return {out, in, k, values}; }
};

/// Transposed-convolution weights, layout [in][out][k][k].
template <typename T>
struct DeconvKernel {
    std::size_t in = 0, out = 0, k = 1;
    std::vector<T> values;

    DeconvKernel() = default;
    DeconvKernel(std::size_t in_, std::size_t out_, std::size_t k_, T fill = T(0))
        : in(in_), out(out_), k(k_), values(in_ * out_ * k_ * k_, fill) {}

    T& at(std::size_t i, std::size_t o, std::size_t ky, std::size_t kx) noexcept {
        return values[((i * out + o) * k + ky) * k + kx];
    }
    DeconvView<T> view() const noexcept { return {in, out, k, values}; }
};

inline std::size_t conv_out_extent(std::size_t n, std::size_t k, std::size_t stride, std::size_t pad) {
    if (n + 2 * pad < k) return 0;
    return (n + 2 * pad - k) / stride + 1;
}

namespace layer_detail {

// Column matrix of shape (C*k*k) x (Ho*Wo).
template <typename T>
RowMatrix<T> im2col(const Tensor<T>& x, std::size_t k, std::size_t stride, std::size_t pad,
                    std::size_t ho, std::size_t wo) {
    RowMatrix<T> cols(static_cast<Eigen::Index>(x.depth() * k * k), static_cast<Eigen::Index>(ho * wo));
    const auto h = static_cast<std::ptrdiff_t>(x.height());
    const auto w = static_cast<std::ptrdiff_t>(x.width());
    T* dst = cols.data();
    for (std::size_t c = 0; c < x.depth(); ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx)
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        *dst++ = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                     ? x.at(c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix))
                                     : T(0);
                    }
                }
    return cols;
}

// Adjoint of im2col: scatters columns back onto a c x h x w map.
template <typename T>
Tensor<T> col2im(const RowMatrix<T>& cols, std::size_t c_count, std::size_t h, std::size_t w, std::size_t k,
                 std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo) {
    Tensor<T> out(c_count, h, w);
    const T* src = cols.data();
    const auto hh = static_cast<std::ptrdiff_t>(h);
    const auto ww = static_cast<std::ptrdiff_t>(w);
    for (std::size_t c = 0; c < c_count; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx)
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    for (std::size_t ox = 0; ox < wo; ++ox, ++src) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        if (iy >= 0 && iy < hh && ix >= 0 && ix < ww)
                            out.at(c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) += *src;
                    }
                }
    return out;
}

template <typename T>
ConstMatrixMap<T> as_matrix(const Tensor<T>& t) {
    return ConstMatrixMap<T>(t.data(), static_cast<Eigen::Index>(t.depth()), static_cast<Eigen::Index>(t.plane()));
}

template <typename T>
MatrixMap<T> as_matrix(Tensor<T>& t) {
    return MatrixMap<T>(t.data(), static_cast<Eigen::Index>(t.depth()), static_cast<Eigen::Index>(t.plane()));
}

}  // namespace layer_detail

// ---------------------------------------------------------------- conv2d

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const ConvView<T>& weights, std::span<const T> bias,
                         std::size_t stride = 1, std::size_t pad = 0) {
    if (x.depth() != weights.in)
        throw ArgumentError("conv input has " + std::to_string(x.depth()) + " channels, kernel expects " +
                            std::to_string(weights.in));
    if (bias.size() != weights.out) throw ArgumentError("conv bias length does not match output channels");
    if (stride == 0) throw ArgumentError("conv stride must be positive");
    const std::size_t ho = conv_out_extent(x.height(), weights.k, stride, pad);
    const std::size_t wo = conv_out_extent(x.width(), weights.k, stride, pad);
    if (ho == 0 || wo == 0)
        throw ArgumentError("conv kernel " + std::to_string(weights.k) + " does not fit padded input " +
                            x.dims_string());

    const auto cols = layer_detail::im2col(x, weights.k, stride, pad, ho, wo);
    ConstMatrixMap<T> w(weights.values.data(), static_cast<Eigen::Index>(weights.out),
                        static_cast<Eigen::Index>(weights.in * weights.k * weights.k));
    Tensor<T> out(weights.out, ho, wo);
    auto o = layer_detail::as_matrix(out);
    o.noalias() = w * cols;
    for (std::size_t c = 0; c < weights.out; ++c) o.row(static_cast<Eigen::Index>(c)).array() += bias[c];
    return out;
}

template <typename T>
struct ConvGrads {
    Tensor<T> grad_x;
    std::vector<T> grad_w;
    std::vector<T> grad_b;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const ConvView<T>& weights, const Tensor<T>& grad_out,
                             std::size_t stride = 1, std::size_t pad = 0) {
    if (x.depth() != weights.in) throw ArgumentError("conv backward: input channels do not match kernel");
    const std::size_t ho = conv_out_extent(x.height(), weights.k, stride, pad);
    const std::size_t wo = conv_out_extent(x.width(), weights.k, stride, pad);
    if (grad_out.depth() != weights.out || grad_out.height() != ho || grad_out.width() != wo)
        throw ArgumentError("conv backward: grad_out is " + grad_out.dims_string() + ", expected " +
                            std::to_string(weights.out) + "x" + std::to_string(ho) + "x" + std::to_string(wo));

    const auto cols = layer_detail::im2col(x, weights.k, stride, pad, ho, wo);
    const auto g = layer_detail::as_matrix(grad_out);
    const auto ckk = static_cast<Eigen::Index>(weights.in * weights.k * weights.k);
    ConstMatrixMap<T> w(weights.values.data(), static_cast<Eigen::Index>(weights.out), ckk);

    ConvGrads<T> r;
    r.grad_w.resize(weights.values.size());
    MatrixMap<T> gw(r.grad_w.data(), static_cast<Eigen::Index>(weights.out), ckk);
    gw.noalias() = g * cols.transpose();
    r.grad_b.resize(weights.out);
    for (std::size_t c = 0; c < weights.out; ++c) r.grad_b[c] = g.row(static_cast<Eigen::Index>(c)).sum();
    RowMatrix<T> gcols = w.transpose() * g;
    r.grad_x = layer_detail::col2im(gcols, x.depth(), x.height(), x.width(), weights.k, stride, pad, ho, wo);
    return r;
}

// ---------------------------------------------------------------- deconv

inline std::size_t deconv_out_extent(std::size_t n, std::size_t k, std::size_t stride) {
    return (n - 1) * stride + k;
}

template <typename T>
Tensor<T> deconv_forward(const Tensor<T>& x, const DeconvView<T>& weights, std::size_t stride) {
    if (stride == 0) throw ArgumentError("deconv stride must be positive");
    if (x.depth() != weights.in)
        throw ArgumentError("deconv input has " + std::to_string(x.depth()) + " channels, kernel expects " +
                            std::to_string(weights.in));
    const std::size_t ho = deconv_out_extent(x.height(), weights.k, stride);
    const std::size_t wo = deconv_out_extent(x.width(), weights.k, stride);
    ConstMatrixMap<T> w(weights.values.data(), static_cast<Eigen::Index>(weights.in),
                        static_cast<Eigen::Index>(weights.out * weights.k * weights.k));
    const RowMatrix<T> cols = w.transpose() * layer_detail::as_matrix(x);
    return layer_detail::col2im(cols, weights.out, ho, wo, weights.k, stride, 0, x.height(), x.width());
}

template <typename T>
struct DeconvGrads {
    Tensor<T> grad_x;
    std::vector<T> grad_w;
};

template <typename T>
DeconvGrads<T> deconv_backward(const Tensor<T>& x, const DeconvView<T>& weights, const Tensor<T>& grad_out,
                               std::size_t stride) {
    if (x.depth() != weights.in) throw ArgumentError("deconv backward: input channels do not match kernel");
    const std::size_t ho = deconv_out_extent(x.height(), weights.k, stride);
    const std::size_t wo = deconv_out_extent(x.width(), weights.k, stride);
    if (grad_out.depth() != weights.out || grad_out.height() != ho || grad_out.width() != wo)
        throw ArgumentError("deconv backward: grad_out is " + grad_out.dims_string() + ", expected " +
                            std::to_string(weights.out) + "x" + std::to_string(ho) + "x" + std::to_string(wo));

    const auto gcols = layer_detail::im2col(grad_out, weights.k, stride, 0, x.height(), x.width());
    const auto okk = static_cast<Eigen::Index>(weights.out * weights.k * weights.k);
    ConstMatrixMap<T> w(weights.values.data(), static_cast<Eigen::Index>(weights.in), okk);

    DeconvGrads<T> r;
    r.grad_x = Tensor<T>(x.depth(), x.height(), x.width());
    layer_detail::as_matrix(r.grad_x).noalias() = w * gcols;
    r.grad_w.resize(weights.values.size());
    MatrixMap<T> gw(r.grad_w.data(), static_cast<Eigen::Index>(weights.in), okk);
    gw.noalias() = layer_detail::as_matrix(x) * gcols.transpose();
    return r;
}

/// Bilinear upsampling kernel of size 2*stride, one filter per channel on
/// the diagonal (channel i -> channel i), zero elsewhere.
template <typename T>
DeconvKernel<T> bilinear_kernel(std::size_t channels, std::size_t stride) {
    const std::size_t k = 2 * stride;
    const double factor = static_cast<double>(stride);
    const double center = factor - 0.5;
    DeconvKernel<T> kernel(channels, channels, k);
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx)
                kernel.at(c, c, ky, kx) = static_cast<T>((1.0 - std::abs(static_cast<double>(ky) - center) / factor) *
                                                         (1.0 - std::abs(static_cast<double>(kx) - center) / factor));
    return kernel;
}

// ---------------------------------------------------------------- max pool

template <typename T>
struct PoolResult {
    Tensor<T> out;
    std::vector<std::size_t> argmax;  // flat input index per output element
};

/// Ties go to the first element of the window in row-major order.
template <typename T>
PoolResult<T> maxpool_forward(const Tensor<T>& x, std::size_t size = 2, std::size_t stride = 2) {
    if (x.height() < size || x.width() < size)
        throw ArgumentError("max pool window " + std::to_string(size) + " exceeds input " + x.dims_string());
    const std::size_t ho = (x.height() - size) / stride + 1;
    const std::size_t wo = (x.width() - size) / stride + 1;
    PoolResult<T> r{Tensor<T>(x.depth(), ho, wo), std::vector<std::size_t>(x.depth() * ho * wo)};
    std::size_t o = 0;
    for (std::size_t c = 0; c < x.depth(); ++c)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox, ++o) {
                std::size_t best = (c * x.height() + oy * stride) * x.width() + ox * stride;
                for (std::size_t ky = 0; ky < size; ++ky)
                    for (std::size_t kx = 0; kx < size; ++kx) {
                        const std::size_t i = (c * x.height() + oy * stride + ky) * x.width() + ox * stride + kx;
                        if (x[i] > x[best]) best = i;
                    }
                r.out[o] = x[best];
                r.argmax[o] = best;
            }
    return r;
}

template <typename T>
Tensor<T> maxpool_backward(const Tensor<T>& grad_out, std::span<const std::size_t> argmax, std::size_t depth,
                           std::size_t height, std::size_t width) {
    if (argmax.size() != grad_out.size()) throw ArgumentError("max pool backward: argmax size mismatch");
    Tensor<T> g(depth, height, width);
    for (std::size_t o = 0; o < grad_out.size(); ++o) g[argmax[o]] += grad_out[o];
    return g;
}

// ---------------------------------------------------------------- elementwise

template <typename T>
void relu_inplace(Tensor<T>& x) noexcept {
    for (auto& v : x.values()) v = v > T(0) ? v : T(0);
}

/// Gradient through ReLU given its output.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& out, Tensor<T> grad) {
    for (std::size_t i = 0; i < grad.size(); ++i)
        if (!(out[i] > T(0))) grad[i] = T(0);
    return grad;
}

template <typename T>
Tensor<T> softmax_forward(const Tensor<T>& logits) {
    Tensor<T> p(logits.depth(), logits.height(), logits.width());
    const std::size_t plane = logits.plane();
    for (std::size_t i = 0; i < plane; ++i) {
        T m = -std::numeric_limits<T>::infinity();
        for (std::size_t c = 0; c < logits.depth(); ++c) m = std::max(m, logits[c * plane + i]);
        T sum = 0;
        for (std::size_t c = 0; c < logits.depth(); ++c) {
            const T e = std::exp(logits[c * plane + i] - m);
            p[c * plane + i] = e;
            sum += e;
        }
        for (std::size_t c = 0; c < logits.depth(); ++c) p[c * plane + i] /= sum;
    }
    return p;
}

/// Given softmax output p and dL/dp, returns dL/dlogits = p * (g - <p, g>).
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& grad_probs) {
    if (!probs.same_dims(grad_probs)) throw ArgumentError("softmax backward: shape mismatch");
    Tensor<T> g(probs.depth(), probs.height(), probs.width());
    const std::size_t plane = probs.plane();
    for (std::size_t i = 0; i < plane; ++i) {
        T dot = 0;
        for (std::size_t c = 0; c < probs.depth(); ++c) dot += probs[c * plane + i] * grad_probs[c * plane + i];
        for (std::size_t c = 0; c < probs.depth(); ++c)
            g[c * plane + i] = probs[c * plane + i] * (grad_probs[c * plane + i] - dot);
    }
    return g;
}

/// Window [y0, y0+h) x [x0, x0+w) of every channel.
template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
    if (y0 + h > x.height() || x0 + w > x.width())
        throw ArgumentError("crop window exceeds " + x.dims_string());
    Tensor<T> out(x.depth(), h, w);
    for (std::size_t c = 0; c < x.depth(); ++c)
        for (std::size_t y = 0; y < h; ++y)
            std::copy_n(&x.at(c, y0 + y, x0), w, &out.at(c, y, 0));
    return out;
}

/// Zero canvas of h x w with `x` placed at (y0, x0); the adjoint of crop.
template <typename T>
Tensor<T> embed(const Tensor<T>& x, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
    if (y0 + x.height() > h || x0 + x.width() > w) throw ArgumentError("embed target too small");
    Tensor<T> out(x.depth(), h, w);
    for (std::size_t c = 0; c < x.depth(); ++c)
        for (std::size_t y = 0; y < x.height(); ++y)
            std::copy_n(&x.at(c, y, 0), x.width(), &out.at(c, y0 + y, x0));
    return out;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_dims(b)) throw ArgumentError("add: " + a.dims_string() + " vs " + b.dims_string());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

// Owning-kernel conveniences.

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const ConvKernel<T>& w, std::span<const T> bias,
                         std::size_t stride = 1, std::size_t pad = 0) {
    return conv2d_forward(x, w.view(), bias, stride, pad);
}
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const ConvKernel<T>& w, const Tensor<T>& grad_out,
                             std::size_t stride = 1, std::size_t pad = 0) {
    return conv2d_backward(x, w.view(), grad_out, stride, pad);
}
template <typename T>
Tensor<T> deconv_forward(const Tensor<T>& x, const DeconvKernel<T>& w, std::size_t stride) {
    return deconv_forward(x, w.view(), stride);
}
template <typename T>
DeconvGrads<T> deconv_backward(const Tensor<T>& x, const DeconvKernel<T>& w, const Tensor<T>& grad_out,
                               std::size_t stride) {
    return deconv_backward(x, w.view(), grad_out, stride);
}

}  // namespace mcseg
