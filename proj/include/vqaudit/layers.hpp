#ifndef VQAUDIT_LAYERS_HPP
#define VQAUDIT_LAYERS_HPP

#include "tensor.hpp"

#include <Eigen/Core>

#include <optional>
#include <utility>
#include <string>

namespace vqa {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

struct ImageDims {
    std::size_t batch;
    std::size_t channels;
    std::size_t height;
    std::size_t width;
};

inline ImageDims image_dims(const Tensor& t, const char* what)
{
    if (t.rank() == 3) {
        return {1, t.dim(0), t.dim(1), t.dim(2)};
    }
    if (t.rank() == 4) {
        return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
    }
    throw ConfigError(std::string(what) + ": expected a CxHxW or NxCxHxW tensor, got " + shape_string(t.shape()));
}

inline Shape image_shape(bool batched, std::size_t n, std::size_t c, std::size_t h, std::size_t w)
{
    return batched ? Shape{n, c, h, w} : Shape{c, h, w};
}

/// Output extent of a strided window; throws naming `dim` unless it is a positive integer.
inline std::size_t conv_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding,
                               const char* dim)
{
    if (stride == 0) {
        throw ConfigError("convolution stride must be positive");
    }
    const auto span = static_cast<long long>(in + 2 * padding) - static_cast<long long>(kernel);
    if (span < 0 || span % static_cast<long long>(stride) != 0) {
        throw ConfigError(std::string("convolution ") + dim + ": (" + std::to_string(in) + " + 2*"
                          + std::to_string(padding) + " - " + std::to_string(kernel) + ") is not a nonnegative multiple of stride "
                          + std::to_string(stride));
    }
    return static_cast<std::size_t>(span) / stride + 1;
}

/// Output columns [lo, hi) whose input column ox * stride + kx - pad lies inside [0, width).
inline std::pair<std::size_t, std::size_t> valid_columns(std::size_t width, std::size_t kx, std::size_t stride,
                                                         std::size_t pad, std::size_t out_w)
{
    const long long off = static_cast<long long>(kx) - static_cast<long long>(pad);
    const long long s = static_cast<long long>(stride);
    const long long lo = off >= 0 ? 0 : (-off + s - 1) / s;
    const long long hi = std::min<long long>(static_cast<long long>(out_w),
                                             (static_cast<long long>(width) - off + s - 1) / s);
    return {static_cast<std::size_t>(std::min<long long>(lo, static_cast<long long>(out_w))),
            static_cast<std::size_t>(std::max(hi, lo))};
}

/// Unfold one CxHxW image into a (C*k*k) x (Ho*Wo) block of a row-major matrix with `ld` columns.
inline void im2col(const double* img, std::size_t channels, std::size_t height, std::size_t width, std::size_t k,
                   std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, double* cols,
                   std::size_t ld)
{
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                double* row = cols + ((c * k + ky) * k + kx) * ld;
                const auto [lo, hi] = valid_columns(width, kx, stride, pad, out_w);
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const long long iy = static_cast<long long>(oy * stride + ky) - static_cast<long long>(pad);
                    double* dst = row + oy * out_w;
                    if (iy < 0 || iy >= static_cast<long long>(height)) {
                        std::fill(dst, dst + out_w, 0.0);
                        continue;
                    }
                    // src[j * stride] is the input column under output column lo + j.
                    const double* src = img + (c * height + static_cast<std::size_t>(iy)) * width + lo * stride + kx - pad;
                    std::fill(dst, dst + lo, 0.0);
                    for (std::size_t ox = lo; ox < hi; ++ox) {
                        dst[ox] = src[(ox - lo) * stride];
                    }
                    std::fill(dst + hi, dst + out_w, 0.0);
                }
            }
        }
    }
}

/// Adjoint of im2col: accumulate a column block back into an image.
inline void col2im(const double* cols, std::size_t ld, std::size_t channels, std::size_t height, std::size_t width,
                   std::size_t k, std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, double* img)
{
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const double* row = cols + ((c * k + ky) * k + kx) * ld;
                const auto [lo, hi] = valid_columns(width, kx, stride, pad, out_w);
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const long long iy = static_cast<long long>(oy * stride + ky) - static_cast<long long>(pad);
                    if (iy < 0 || iy >= static_cast<long long>(height)) {
                        continue;
                    }
                    double* dst = img + (c * height + static_cast<std::size_t>(iy)) * width + lo * stride + kx - pad;
                    const double* src = row + oy * out_w;
                    for (std::size_t ox = lo; ox < hi; ++ox) {
                        dst[(ox - lo) * stride] += src[ox];
                    }
                }
            }
        }
    }
}

inline void check_kernels(const Tensor& kernels, const Tensor& bias, std::size_t in_channels, bool transposed)
{
    if (kernels.rank() != 4 || kernels.dim(2) != kernels.dim(3)) {
        throw ConfigError("kernels must be square and rank 4, got " + shape_string(kernels.shape()));
    }
    const std::size_t expect_in = transposed ? kernels.dim(0) : kernels.dim(1);
    if (expect_in != in_channels) {
        throw ConfigError("input channel dimension " + std::to_string(in_channels) + " does not match kernel input channels "
                          + std::to_string(expect_in));
    }
    const std::size_t out_channels = transposed ? kernels.dim(1) : kernels.dim(0);
    if (bias.rank() != 1 || bias.dim(0) != out_channels) {
        throw ConfigError("bias length must equal output channels " + std::to_string(out_channels) + ", got "
                          + shape_string(bias.shape()));
    }
}

} // namespace detail

/// Input saved by a forward pass for use by the matching backward pass.
struct ConvCache {
    std::optional<Tensor> input;
};

struct ConvGrads {
    Tensor input;
    Tensor kernels;
    Tensor bias;
};

// Every convolution runs image by image: the unfolded block of one image stays in cache, and the
// NxCxHxW layout already holds each image as a C x (H*W) row-major matrix.

namespace detail {

struct ConvGeometry {
    ImageDims in;
    std::size_t k = 0;
    std::size_t out_c = 0;
    std::size_t out_h = 0;
    std::size_t out_w = 0;
};

inline ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                                  std::size_t stride, std::size_t padding)
{
    ConvGeometry g;
    g.in = image_dims(input, "conv2d");
    check_kernels(kernels, bias, g.in.channels, false);
    g.k = kernels.dim(2);
    g.out_c = kernels.dim(0);
    g.out_h = conv_extent(g.in.height, g.k, stride, padding, "height");
    g.out_w = conv_extent(g.in.width, g.k, stride, padding, "width");
    return g;
}

inline void add_channel_bias(double* img, const Tensor& bias, std::size_t channels, std::size_t hw)
{
    for (std::size_t c = 0; c < channels; ++c) {
        const double b = bias[c];
        double* dst = img + c * hw;
        for (std::size_t i = 0; i < hw; ++i) {
            dst[i] += b;
        }
    }
}

} // namespace detail

/// Cross-correlation. input CxHxW (or NxCxHxW), kernels OxCxkxk, bias O.
inline Tensor conv2d_forward(const Tensor& input, const Tensor& kernels, const Tensor& bias, std::size_t stride,
                             std::size_t padding)
{
    using namespace detail;
    const ConvGeometry g = conv_geometry(input, kernels, bias, stride, padding);
    const ImageDims& d = g.in;
    const auto rows = static_cast<Eigen::Index>(d.channels * g.k * g.k);
    const std::size_t ohw = g.out_h * g.out_w;
    const ConstRowMap weights(kernels.data().data(), static_cast<Eigen::Index>(g.out_c), rows);
    RowMatrix cols(rows, static_cast<Eigen::Index>(ohw));
    Tensor out(image_shape(input.rank() == 4, d.batch, g.out_c, g.out_h, g.out_w));
    for (std::size_t n = 0; n < d.batch; ++n) {
        im2col(input.data().data() + n * d.channels * d.height * d.width, d.channels, d.height, d.width, g.k, stride,
               padding, g.out_h, g.out_w, cols.data(), ohw);
        double* dst = out.data().data() + n * g.out_c * ohw;
        RowMap(dst, static_cast<Eigen::Index>(g.out_c), static_cast<Eigen::Index>(ohw)).noalias() = weights * cols;
        add_channel_bias(dst, bias, g.out_c, ohw);
    }
    return out;
}

inline Tensor conv2d_forward(const Tensor& input, const Tensor& kernels, const Tensor& bias, std::size_t stride,
                             std::size_t padding, ConvCache& cache)
{
    Tensor out = conv2d_forward(input, kernels, bias, stride, padding);
    cache.input = input;
    return out;
}

/// Gradients of sum(grad_out * conv2d_forward(...)) with respect to input, kernels and bias.
/// With `param_grads` false only the input gradient is produced; with `input_grad` false it is skipped.
inline ConvGrads conv2d_backward(const Tensor& grad_out, const ConvCache& cache, const Tensor& kernels,
                                 std::size_t stride, std::size_t padding, bool param_grads = true,
                                 bool input_grad = true)
{
    using namespace detail;
    if (!cache.input) {
        throw UsageError("conv2d_backward called without a forward cache");
    }
    const Tensor& input = *cache.input;
    const ImageDims d = image_dims(input, "conv2d_backward");
    const std::size_t k = kernels.dim(2);
    const std::size_t out_c = kernels.dim(0);
    const std::size_t out_h = conv_extent(d.height, k, stride, padding, "height");
    const std::size_t out_w = conv_extent(d.width, k, stride, padding, "width");
    const Shape expected = image_shape(input.rank() == 4, d.batch, out_c, out_h, out_w);
    if (grad_out.shape() != expected) {
        throw ConfigError("conv2d_backward: grad_out shape " + shape_string(grad_out.shape())
                          + " differs from forward output " + shape_string(expected));
    }

    const auto rows = static_cast<Eigen::Index>(d.channels * k * k);
    const std::size_t ohw = out_h * out_w;
    const std::size_t image = d.channels * d.height * d.width;
    const ConstRowMap weights(kernels.data().data(), static_cast<Eigen::Index>(out_c), rows);
    RowMatrix cols(rows, static_cast<Eigen::Index>(ohw));

    ConvGrads grads;
    if (input_grad) {
        grads.input = Tensor(input.shape());
    }
    RowMatrix gw;
    if (param_grads) {
        gw = RowMatrix::Zero(static_cast<Eigen::Index>(out_c), rows);
        grads.bias = Tensor({out_c});
    }
    for (std::size_t n = 0; n < d.batch; ++n) {
        const ConstRowMap g(grad_out.data().data() + n * out_c * ohw, static_cast<Eigen::Index>(out_c),
                            static_cast<Eigen::Index>(ohw));
        if (input_grad) {
            cols.noalias() = weights.transpose() * g;
            col2im(cols.data(), ohw, d.channels, d.height, d.width, k, stride, padding, out_h, out_w,
                   grads.input.data().data() + n * image);
        }
        if (param_grads) {
            im2col(input.data().data() + n * image, d.channels, d.height, d.width, k, stride, padding, out_h, out_w,
                   cols.data(), ohw);
            gw.noalias() += g * cols.transpose();
            for (std::size_t c = 0; c < out_c; ++c) {
                grads.bias[c] += g.row(static_cast<Eigen::Index>(c)).sum();
            }
        }
    }
    if (param_grads) {
        grads.kernels = Tensor(kernels.shape());
        RowMap(grads.kernels.data().data(), gw.rows(), gw.cols()) = gw;
    }
    return grads;
}

/// Transposed convolution (gradient of conv2d w.r.t. its input). input CxHxW, kernels CxOxkxk.
/// Output extent is (H - 1) * stride - 2 * padding + k.
inline Tensor conv2d_transpose_forward(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                                       std::size_t stride, std::size_t padding)
{
    using namespace detail;
    const ImageDims d = image_dims(input, "conv2d_transpose");
    check_kernels(kernels, bias, d.channels, true);
    if (stride == 0) {
        throw ConfigError("convolution stride must be positive");
    }
    const std::size_t k = kernels.dim(2);
    const std::size_t out_c = kernels.dim(1);
    const auto extent = [&](std::size_t in, const char* dim) {
        const long long e = static_cast<long long>((in - 1) * stride + k) - 2 * static_cast<long long>(padding);
        if (e <= 0) {
            throw ConfigError(std::string("transposed convolution ") + dim + " collapses to " + std::to_string(e));
        }
        return static_cast<std::size_t>(e);
    };
    const std::size_t out_h = extent(d.height, "height");
    const std::size_t out_w = extent(d.width, "width");

    const std::size_t hw = d.height * d.width;
    const std::size_t ohw = out_h * out_w;
    const ConstRowMap weights(kernels.data().data(), static_cast<Eigen::Index>(d.channels),
                              static_cast<Eigen::Index>(out_c * k * k));
    RowMatrix cols(weights.cols(), static_cast<Eigen::Index>(hw));
    Tensor out(image_shape(input.rank() == 4, d.batch, out_c, out_h, out_w));
    for (std::size_t n = 0; n < d.batch; ++n) {
        const ConstRowMap x(input.data().data() + n * d.channels * hw, static_cast<Eigen::Index>(d.channels),
                            static_cast<Eigen::Index>(hw));
        cols.noalias() = weights.transpose() * x;
        double* dst = out.data().data() + n * out_c * ohw;
        col2im(cols.data(), hw, out_c, out_h, out_w, k, stride, padding, d.height, d.width, dst);
        add_channel_bias(dst, bias, out_c, ohw);
    }
    return out;
}

inline Tensor conv2d_transpose_forward(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                                       std::size_t stride, std::size_t padding, ConvCache& cache)
{
    Tensor out = conv2d_transpose_forward(input, kernels, bias, stride, padding);
    cache.input = input;
    return out;
}

inline ConvGrads conv2d_transpose_backward(const Tensor& grad_out, const ConvCache& cache, const Tensor& kernels,
                                           std::size_t stride, std::size_t padding, bool param_grads = true)
{
    using namespace detail;
    if (!cache.input) {
        throw UsageError("conv2d_transpose_backward called without a forward cache");
    }
    const Tensor& input = *cache.input;
    const ImageDims d = image_dims(input, "conv2d_transpose_backward");
    const std::size_t k = kernels.dim(2);
    const std::size_t out_c = kernels.dim(1);
    const ImageDims gd = image_dims(grad_out, "conv2d_transpose_backward");
    const std::size_t out_h = (d.height - 1) * stride + k - 2 * padding;
    const std::size_t out_w = (d.width - 1) * stride + k - 2 * padding;
    if (gd.batch != d.batch || gd.channels != out_c || gd.height != out_h || gd.width != out_w
        || grad_out.rank() != input.rank()) {
        throw ConfigError("conv2d_transpose_backward: grad_out shape " + shape_string(grad_out.shape())
                          + " differs from forward output");
    }

    const std::size_t hw = d.height * d.width;
    const std::size_t ohw = out_h * out_w;
    const ConstRowMap weights(kernels.data().data(), static_cast<Eigen::Index>(d.channels),
                              static_cast<Eigen::Index>(out_c * k * k));
    RowMatrix gcols(weights.cols(), static_cast<Eigen::Index>(hw));

    ConvGrads grads;
    grads.input = Tensor(input.shape());
    RowMatrix gw;
    if (param_grads) {
        gw = RowMatrix::Zero(weights.rows(), weights.cols());
        grads.bias = Tensor({out_c});
    }
    for (std::size_t n = 0; n < d.batch; ++n) {
        const double* gimg = grad_out.data().data() + n * out_c * ohw;
        im2col(gimg, out_c, out_h, out_w, k, stride, padding, d.height, d.width, gcols.data(), hw);
        RowMap(grads.input.data().data() + n * d.channels * hw, static_cast<Eigen::Index>(d.channels),
               static_cast<Eigen::Index>(hw))
            .noalias() = weights * gcols;
        if (param_grads) {
            const ConstRowMap x(input.data().data() + n * d.channels * hw, static_cast<Eigen::Index>(d.channels),
                                static_cast<Eigen::Index>(hw));
            gw.noalias() += x * gcols.transpose();
            for (std::size_t c = 0; c < out_c; ++c) {
                double s = 0.0;
                for (std::size_t i = 0; i < ohw; ++i) {
                    s += gimg[c * ohw + i];
                }
                grads.bias[c] += s;
            }
        }
    }
    if (param_grads) {
        grads.kernels = Tensor(kernels.shape());
        RowMap(grads.kernels.data().data(), gw.rows(), gw.cols()) = gw;
    }
    return grads;
}

inline Tensor relu_forward(const Tensor& x)
{
    Tensor y = x;
    for (auto& v : y.values()) {
        v = v > 0.0 ? v : 0.0;
    }
    return y;
}

/// Subgradient at exactly zero is taken as 0.
inline Tensor relu_backward(const Tensor& grad_out, const Tensor& x)
{
    x.require_same_shape(grad_out, "relu_backward");
    Tensor g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!(x[i] > 0.0)) {
            g[i] = 0.0;
        }
    }
    return g;
}

struct LossAndGrad {
    double loss = 0.0;
    Tensor grad;
};

/// Mean squared error and its gradient with respect to `a`.
inline LossAndGrad mse_loss(const Tensor& a, const Tensor& b)
{
    a.require_same_shape(b, "mse_loss");
    LossAndGrad r;
    r.grad = Tensor(a.shape());
    const double n = static_cast<double>(a.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        sum += diff * diff;
        r.grad[i] = 2.0 * diff / n;
    }
    r.loss = sum / n;
    return r;
}

} // namespace vqa

#endif
