// Reference implementations used only by tests: naive loops, finite differences, brute force.
#pragma once

#include <vqaudit/layers.hpp>
#include <vqaudit/rng.hpp>
#include <vqaudit/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <functional>

namespace vqa::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0)
{
    Tensor t(std::move(shape));
    for (auto& v : t.values()) {
        v = scale * (2.0 * rng.uniform() - 1.0);
    }
    return t;
}

inline double dot(const Tensor& a, const Tensor& b)
{
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

inline Tensor naive_conv(const Tensor& x, const Tensor& k, const Tensor& b, std::size_t s, std::size_t p)
{
    const std::size_t c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t c_out = k.dim(0), kk = k.dim(2);
    const std::size_t oh = (h + 2 * p - kk) / s + 1, ow = (w + 2 * p - kk) / s + 1;
    Tensor y({c_out, oh, ow});
    for (std::size_t o = 0; o < c_out; ++o)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double acc = b[o];
                for (std::size_t c = 0; c < c_in; ++c)
                    for (std::size_t ky = 0; ky < kk; ++ky)
                        for (std::size_t kx = 0; kx < kk; ++kx) {
                            const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(p);
                            const long ix = static_cast<long>(ox * s + kx) - static_cast<long>(p);
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) {
                                continue;
                            }
                            acc += x.at(c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) * k.at(o, c, ky, kx);
                        }
                y.at(o, oy, ox) = acc;
            }
    return y;
}

/// Scatter form: every input pixel stamps its kernel into the (padded) output.
inline Tensor naive_conv_transpose(const Tensor& x, const Tensor& k, const Tensor& b, std::size_t s, std::size_t p)
{
    const std::size_t c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t c_out = k.dim(1), kk = k.dim(2);
    const std::size_t oh = (h - 1) * s + kk - 2 * p, ow = (w - 1) * s + kk - 2 * p;
    Tensor y({c_out, oh, ow});
    for (std::size_t o = 0; o < c_out; ++o)
        for (std::size_t yy = 0; yy < oh; ++yy)
            for (std::size_t xx = 0; xx < ow; ++xx) {
                y.at(o, yy, xx) = b[o];
            }
    for (std::size_t c = 0; c < c_in; ++c)
        for (std::size_t iy = 0; iy < h; ++iy)
            for (std::size_t ix = 0; ix < w; ++ix)
                for (std::size_t o = 0; o < c_out; ++o)
                    for (std::size_t ky = 0; ky < kk; ++ky)
                        for (std::size_t kx = 0; kx < kk; ++kx) {
                            const long yy = static_cast<long>(iy * s + ky) - static_cast<long>(p);
                            const long xx = static_cast<long>(ix * s + kx) - static_cast<long>(p);
                            if (yy < 0 || xx < 0 || yy >= static_cast<long>(oh) || xx >= static_cast<long>(ow)) {
                                continue;
                            }
                            y.at(o, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) +=
                                x.at(c, iy, ix) * k.at(c, o, ky, kx);
                        }
    return y;
}

/// Central differences of a scalar function of one tensor.
inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, const Tensor& at, double h = 1e-4)
{
    Tensor g(at.shape());
    Tensor probe = at;
    for (std::size_t i = 0; i < at.size(); ++i) {
        const double keep = probe[i];
        probe[i] = keep + h;
        const double up = f(probe);
        probe[i] = keep - h;
        const double down = f(probe);
        probe[i] = keep;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

/// Relative error <= rel with an absolute floor for entries near zero.
inline bool gradients_close(const Tensor& analytic, const Tensor& numeric, double rel = 1e-4, double floor = 1e-7)
{
    if (analytic.shape() != numeric.shape()) {
        return false;
    }
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double diff = std::abs(analytic[i] - numeric[i]);
        const double scale = std::max(std::abs(analytic[i]), std::abs(numeric[i]));
        if (diff > floor && diff > rel * scale) {
            return false;
        }
    }
    return true;
}

/// Checks input, kernel and bias gradients of a (transposed) conv against finite differences of
/// the scalar sum(w * output) for a random weighting w.
inline bool check_conv_gradients(bool transposed, Shape in_shape, Shape k_shape, std::size_t s, std::size_t p, Rng& rng)
{
    const Tensor x = random_tensor(in_shape, rng);
    const Tensor k = random_tensor(k_shape, rng);
    const Tensor b = random_tensor({transposed ? k_shape[1] : k_shape[0]}, rng);
    const auto fwd = [&](const Tensor& xi, const Tensor& ki, const Tensor& bi) {
        return transposed ? conv2d_transpose_forward(xi, ki, bi, s, p) : conv2d_forward(xi, ki, bi, s, p);
    };
    ConvCache cache;
    const Tensor y = transposed ? conv2d_transpose_forward(x, k, b, s, p, cache) : conv2d_forward(x, k, b, s, p, cache);
    const Tensor w = random_tensor(y.shape(), rng);
    const ConvGrads g = transposed ? conv2d_transpose_backward(w, cache, k, s, p) : conv2d_backward(w, cache, k, s, p);
    const Tensor nx = numeric_gradient([&](const Tensor& t) { return dot(fwd(t, k, b), w); }, x);
    const Tensor nk = numeric_gradient([&](const Tensor& t) { return dot(fwd(x, t, b), w); }, k);
    const Tensor nb = numeric_gradient([&](const Tensor& t) { return dot(fwd(x, k, t), w); }, b);
    return gradients_close(g.input, nx) && gradients_close(g.kernels, nk) && gradients_close(g.bias, nb);
}

} // namespace vqa::testing
