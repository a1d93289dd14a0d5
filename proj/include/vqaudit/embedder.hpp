#ifndef VQAUDIT_EMBEDDER_HPP
#define VQAUDIT_EMBEDDER_HPP

#include "image.hpp"
#include "vqcodec.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace vqa {

inline constexpr std::size_t kEmbedSide = 32;
inline constexpr std::size_t kColorBins = 8;
inline constexpr std::size_t kOrientationBins = 8;
inline constexpr std::size_t kCellGrid = 4;
inline constexpr std::size_t kColorDims = 3 * kColorBins;                                  // 24
inline constexpr std::size_t kGradientDims = kCellGrid * kCellGrid * kOrientationBins;     // 128
inline constexpr std::size_t kDescriptorDims = kColorDims + kGradientDims;                 // 152

struct Descriptor {
    std::vector<double> values;
    bool flat = false; // no luminance gradient anywhere in the resized crop
};

enum class EmbedderKind { descriptor, encoder };

inline std::string embedder_name(EmbedderKind k) { return k == EmbedderKind::descriptor ? "descriptor" : "encoder"; }

inline EmbedderKind parse_embedder(const std::string& s)
{
    if (s == "descriptor") {
        return EmbedderKind::descriptor;
    }
    if (s == "encoder") {
        return EmbedderKind::encoder;
    }
    throw ConfigError("unknown embedder '" + s + "' (expected descriptor or encoder)");
}

namespace detail {

inline std::vector<double> image_values(const RgbImage& img)
{
    return std::vector<double>(img.pixels.begin(), img.pixels.end());
}

/// Divides by the Euclidean norm; a zero vector stays zero.
inline void l2_normalize(std::vector<double>& v)
{
    double s = 0.0;
    for (double x : v) {
        s += x * x;
    }
    const double n = std::sqrt(s);
    if (n > 0.0) {
        for (double& x : v) {
            x /= n;
        }
    }
}

/// Orientation bin of a gradient: the nearest multiple of 45 degrees, counter-clockwise from +x
/// with y pointing down the image.
inline std::size_t orientation_bin(double gx, double gy)
{
    double theta = std::atan2(gy, gx);
    if (theta < 0.0) {
        theta += 2.0 * std::numbers::pi;
    }
    const auto b = static_cast<long>(std::lround(theta / (std::numbers::pi / 4.0)));
    return static_cast<std::size_t>(b % static_cast<long>(kOrientationBins));
}

} // namespace detail

/// Unnormalized parts, exposed for tests: 24 color dims (sum 3) followed by 128 gradient dims.
inline std::vector<double> raw_descriptor(const RgbImage& crop)
{
    if (crop.width == 0 || crop.height == 0) {
        throw ConfigError("cannot embed an empty crop");
    }
    const std::size_t n = kEmbedSide;
    const std::vector<double> px = resize_bilinear(detail::image_values(crop), crop.height, crop.width, 3, n, n);
    std::vector<double> out(kDescriptorDims, 0.0);

    const double unit = 1.0 / static_cast<double>(n * n);
    for (std::size_t p = 0; p < n * n; ++p) {
        for (std::size_t c = 0; c < 3; ++c) {
            const auto bin = std::min<std::size_t>(kColorBins - 1, static_cast<std::size_t>(px[p * 3 + c] / 32.0));
            out[c * kColorBins + bin] += unit;
        }
    }

    std::vector<double> lum(n * n);
    for (std::size_t p = 0; p < n * n; ++p) {
        lum[p] = (0.299 * px[p * 3] + 0.587 * px[p * 3 + 1] + 0.114 * px[p * 3 + 2]) / 255.0;
    }
    const std::size_t cell = n / kCellGrid;
    for (std::size_t y = 0; y < n; ++y) {
        const std::size_t up = y == 0 ? 0 : y - 1, down = std::min(n - 1, y + 1);
        for (std::size_t x = 0; x < n; ++x) {
            const std::size_t left = x == 0 ? 0 : x - 1, right = std::min(n - 1, x + 1);
            const double gx = (lum[y * n + right] - lum[y * n + left]) / 2.0;
            const double gy = (lum[down * n + x] - lum[up * n + x]) / 2.0;
            const double mag = std::hypot(gx, gy);
            if (mag == 0.0) {
                continue;
            }
            const std::size_t cell_index = (y / cell) * kCellGrid + x / cell;
            out[kColorDims + cell_index * kOrientationBins + detail::orientation_bin(gx, gy)] += mag;
        }
    }
    return out;
}

/// Color histograms and cell orientation histograms of the crop resized to 32x32, L2-normalized.
inline Descriptor embed_crop(const RgbImage& crop)
{
    Descriptor d{raw_descriptor(crop), false};
    d.flat = std::all_of(d.values.begin() + kColorDims, d.values.end(), [](double v) { return v == 0.0; });
    detail::l2_normalize(d.values);
    return d;
}

/// Encoder backend: crop resized to the model input, encoded, mean-pooled over the latent grid.
inline std::vector<double> pooled_latent(const VQCodecModel& model, const RgbImage& crop)
{
    if (crop.width == 0 || crop.height == 0) {
        throw ConfigError("cannot embed an empty crop");
    }
    const Shape& in = model.architecture.input;
    const std::vector<double> px = resize_bilinear(detail::image_values(crop), crop.height, crop.width, 3, in[1], in[2]);
    Tensor t(in);
    for (std::size_t y = 0; y < in[1]; ++y) {
        for (std::size_t x = 0; x < in[2]; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                t.at(c, y, x) = px[(y * in[2] + x) * 3 + c] / 255.0;
            }
        }
    }
    const Tensor z = encode(model, t);
    const std::size_t d = z.dim(0), hw = z.dim(1) * z.dim(2);
    std::vector<double> pooled(d, 0.0);
    for (std::size_t k = 0; k < d; ++k) {
        for (std::size_t p = 0; p < hw; ++p) {
            pooled[k] += z[k * hw + p];
        }
        pooled[k] /= static_cast<double>(hw);
    }
    return pooled;
}

inline Descriptor embed_with_encoder(const VQCodecModel& model, const RgbImage& crop)
{
    Descriptor d{pooled_latent(model, crop), false};
    d.flat = std::all_of(d.values.begin(), d.values.end(), [](double v) { return v == 0.0; });
    detail::l2_normalize(d.values);
    return d;
}

/// Backend dispatch. `model` is required for the encoder backend.
inline Descriptor embed(EmbedderKind kind, const RgbImage& crop, const VQCodecModel* model = nullptr)
{
    if (kind == EmbedderKind::descriptor) {
        return embed_crop(crop);
    }
    if (model == nullptr) {
        throw UsageError("encoder embedder needs a model");
    }
    return embed_with_encoder(*model, crop);
}

} // namespace vqa

#endif
