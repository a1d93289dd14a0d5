#ifndef VQAUDIT_SALIENCY_HPP
#define VQAUDIT_SALIENCY_HPP

#include "vqcodec.hpp"

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

namespace vqa {

/// Differentiable stand-in for "code c was chosen here".
enum class TargetKind {
    negative_distance, // -sum over c-positions of |z_e[p] - c|^2
    inner_product      // sum over c-positions of <z_e[p], c>
};

enum class Upsample { bilinear, nearest };

struct SaliencyConfig {
    std::optional<std::size_t> target_layer; // encoder layer whose output is attributed; default: last ReLU
    double epsilon = 1e-8;
    Upsample upsample = Upsample::bilinear;
    TargetKind target = TargetKind::negative_distance;
};

/// Per-pixel saliency of one (observation, code) pair. Values are in [0, 1]; nonzero maps peak at 1.
struct Heatmap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;
    std::size_t episode = 0;
    std::size_t step = 0;
    int code = 0;
    bool is_zero = true;
    double raw_max = 0.0; // max of the upsampled map before normalization

    double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

struct TargetValue {
    double value = 0.0;
    Tensor grad; // with respect to z_e, same shape
};

/// Target scalar for code `c` with every position not assigned to `c` masked out.
/// `z_e` is d x H x W; `assignments` has H*W entries.
inline TargetValue code_target(const Tensor& z_e, const Tensor& codes, std::span<const int> assignments, int c,
                               TargetKind kind = TargetKind::negative_distance)
{
    if (c < 0 || static_cast<std::size_t>(c) >= codes.dim(0)) {
        throw UsageError("code " + std::to_string(c) + " outside [0, " + std::to_string(codes.dim(0)) + ")");
    }
    const std::size_t d = z_e.dim(0);
    const std::size_t hw = z_e.dim(1) * z_e.dim(2);
    if (assignments.size() != hw || codes.dim(1) != d) {
        throw ConfigError("code_target: assignments or codebook do not match the latent grid");
    }
    const double* code = codes.data().data() + static_cast<std::size_t>(c) * d;
    TargetValue t{0.0, Tensor(z_e.shape())};
    for (std::size_t p = 0; p < hw; ++p) {
        if (assignments[p] != c) {
            continue;
        }
        for (std::size_t k = 0; k < d; ++k) {
            const double z = z_e[k * hw + p];
            if (kind == TargetKind::negative_distance) {
                t.value -= (z - code[k]) * (z - code[k]);
                t.grad[k * hw + p] = -2.0 * (z - code[k]);
            } else {
                t.value += z * code[k];
                t.grad[k * hw + p] = code[k];
            }
        }
    }
    return t;
}

/// Spatial mean of each channel of a C x H x W gradient.
inline std::vector<double> channel_means(const Tensor& g)
{
    const std::size_t channels = g.dim(0), hw = g.dim(1) * g.dim(2);
    std::vector<double> alpha(channels, 0.0);
    for (std::size_t k = 0; k < channels; ++k) {
        double s = 0.0;
        for (std::size_t p = 0; p < hw; ++p) {
            s += g[k * hw + p];
        }
        alpha[k] = s / static_cast<double>(hw);
    }
    return alpha;
}

/// ReLU(sum_k alpha_k A_k), resized to height x width and normalized by its max. A gradient that is
/// identically zero short-circuits to a zero map.
inline Heatmap compose_heatmap(const Tensor& activation, const Tensor& grad, std::size_t height, std::size_t width,
                               const SaliencyConfig& config)
{
    Heatmap h;
    h.height = height;
    h.width = width;
    h.values.assign(height * width, 0.0);
    activation.require_same_shape(grad, "compose_heatmap");
    if (!grad.all_finite()) {
        throw NumericError("non-finite Grad-CAM gradient");
    }
    if (std::all_of(grad.values().begin(), grad.values().end(), [](double v) { return v == 0.0; })) {
        return h;
    }
    const std::vector<double> alpha = channel_means(grad);
    const std::size_t ah = activation.dim(1), aw = activation.dim(2), hw = ah * aw;
    std::vector<double> raw(hw, 0.0);
    for (std::size_t k = 0; k < alpha.size(); ++k) {
        if (alpha[k] == 0.0) {
            continue;
        }
        const double* ak = activation.data().data() + k * hw;
        for (std::size_t p = 0; p < hw; ++p) {
            raw[p] += alpha[k] * ak[p];
        }
    }
    for (auto& v : raw) {
        v = std::max(v, 0.0);
    }
    h.values = config.upsample == Upsample::bilinear ? resize_bilinear(raw, ah, aw, 1, height, width)
                                                     : resize_nearest(raw, ah, aw, height, width);
    h.raw_max = *std::max_element(h.values.begin(), h.values.end());
    if (!std::isfinite(h.raw_max)) {
        throw NumericError("non-finite Grad-CAM map");
    }
    if (h.raw_max <= config.epsilon) {
        std::fill(h.values.begin(), h.values.end(), 0.0);
        return h;
    }
    for (auto& v : h.values) {
        v /= h.raw_max;
    }
    h.is_zero = false;
    return h;
}

/// One encoder pass over an observation, reused for the heatmaps of every code.
class GradCamSession {
public:
    GradCamSession(const VQCodecModel& model, const Tensor& frame, SaliencyConfig config = {})
        : model_(&model)
        , config_(config)
    {
        if (frame.shape() != model.architecture.input) {
            throw ConfigError("observation shape " + shape_string(frame.shape()) + " does not match model input "
                              + shape_string(model.architecture.input));
        }
        height_ = frame.dim(1);
        width_ = frame.dim(2);
        const std::size_t layers = model.encoder.size();
        layer_ = config.target_layer.value_or(model.encoder.last_activation_index());
        if (layer_ >= layers) {
            throw ConfigError("target layer " + std::to_string(layer_) + " outside the " + std::to_string(layers)
                              + "-layer encoder");
        }
        if (!(config.epsilon >= 0.0)) {
            throw ConfigError("zero tolerance must be nonnegative");
        }
        const Tensor z = model.encoder.forward(frame, &trace_);
        quantized_ = quantize(z, model.codes());
    }

    GradCamSession(const VQCodecModel& model, const RgbImage& frame, SaliencyConfig config = {})
        : GradCamSession(model, to_tensor(frame), config)
    {
    }

    const QuantizedLatent& quantized() const noexcept { return quantized_; }
    std::vector<int> selected_codes() const { return quantized_.selected_codes(); }
    const Tensor& activation() const { return trace_.activation(layer_); }
    std::size_t target_layer() const noexcept { return layer_; }

    /// Gradient of the target scalar with respect to the target-layer activation.
    Tensor activation_gradient(int code) const
    {
        const TargetValue t =
            code_target(quantized_.z_e, model_->codes(), quantized_.assignments, code, config_.target);
        return model_->encoder.backward(trace_, t.grad, layer_ + 1);
    }

    /// Channel weights: spatial mean of the activation gradient per channel.
    std::vector<double> channel_weights(int code) const { return channel_means(activation_gradient(code)); }

    Heatmap heatmap(int code, std::size_t episode = 0, std::size_t step = 0) const
    {
        Heatmap h = compose_heatmap(activation(), activation_gradient(code), height_, width_, config_);
        h.code = code;
        h.episode = episode;
        h.step = step;
        return h;
    }

private:
    const VQCodecModel* model_;
    SaliencyConfig config_;
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::size_t layer_ = 0;
    Trace trace_;
    QuantizedLatent quantized_;
};

/// Single-shot Grad-CAM for one code. Prefer GradCamSession when several codes share an observation.
inline Heatmap gradcam(const VQCodecModel& model, const RgbImage& frame, int code, const SaliencyConfig& config = {})
{
    return GradCamSession(model, frame, config).heatmap(code);
}

struct ZeroFilterResult {
    std::vector<Heatmap> kept;
    std::size_t dropped = 0;
    double dropped_fraction = 0.0; // 0 for an empty batch
};

/// Keeps heatmaps whose pre-normalization max exceeds `epsilon`.
inline ZeroFilterResult filter_zero(std::vector<Heatmap> heatmaps, double epsilon = 1e-8)
{
    ZeroFilterResult r;
    const std::size_t total = heatmaps.size();
    for (auto& h : heatmaps) {
        if (h.raw_max > epsilon) {
            r.kept.push_back(std::move(h));
        } else {
            ++r.dropped;
        }
    }
    r.dropped_fraction = total == 0 ? 0.0 : static_cast<double>(r.dropped) / static_cast<double>(total);
    return r;
}

} // namespace vqa

#endif
