#ifndef VQAUDIT_NETWORK_HPP
#define VQAUDIT_NETWORK_HPP

#include "layers.hpp"
#include "params.hpp"
#include "rng.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace vqa {

enum class LayerKind { conv, conv_transpose, relu };

inline const char* layer_kind_name(LayerKind k)
{
    switch (k) {
    case LayerKind::conv:
        return "conv";
    case LayerKind::conv_transpose:
        return "conv_transpose";
    case LayerKind::relu:
        return "relu";
    }
    return "?";
}

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;

    static LayerSpec conv(std::size_t in, std::size_t out, std::size_t k, std::size_t s = 1, std::size_t p = 0)
    {
        return {LayerKind::conv, in, out, k, s, p};
    }
    static LayerSpec conv_transpose(std::size_t in, std::size_t out, std::size_t k, std::size_t s = 1,
                                    std::size_t p = 0)
    {
        return {LayerKind::conv_transpose, in, out, k, s, p};
    }
    static LayerSpec relu() { return {}; }

    bool has_params() const { return kind != LayerKind::relu; }

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

inline void to_json(nlohmann::json& j, const LayerSpec& l)
{
    j = nlohmann::json{{"kind", layer_kind_name(l.kind)}};
    if (l.has_params()) {
        j["in"] = l.in_channels;
        j["out"] = l.out_channels;
        j["kernel"] = l.kernel;
        j["stride"] = l.stride;
        j["padding"] = l.padding;
    }
}

inline void from_json(const nlohmann::json& j, LayerSpec& l)
{
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "relu") {
        l = LayerSpec::relu();
        return;
    }
    if (kind != "conv" && kind != "conv_transpose") {
        throw LoadError("unknown layer kind '" + kind + "'");
    }
    l.kind = kind == "conv" ? LayerKind::conv : LayerKind::conv_transpose;
    l.in_channels = j.at("in").get<std::size_t>();
    l.out_channels = j.at("out").get<std::size_t>();
    l.kernel = j.at("kernel").get<std::size_t>();
    l.stride = j.at("stride").get<std::size_t>();
    l.padding = j.at("padding").get<std::size_t>();
}

/// Per-layer inputs recorded during a forward pass. caches[i] holds the input of layer i.
struct Trace {
    std::vector<ConvCache> caches;
    Tensor output;

    /// Output of layer i.
    const Tensor& activation(std::size_t i) const { return i + 1 < caches.size() ? *caches[i + 1].input : output; }
};

/// A fixed stack of conv / transposed-conv / ReLU layers with hand-written backward passes.
class Sequential {
public:
    Sequential() = default;

    /// Weights drawn from a He-style normal when `rng` is given, zero otherwise. Biases start at zero.
    explicit Sequential(std::vector<LayerSpec> layers, const std::string& prefix = "layer", Rng* rng = nullptr)
        : layers_(std::move(layers))
    {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            if (!l.has_params()) {
                param_index_.push_back(-1);
                continue;
            }
            if (l.in_channels == 0 || l.out_channels == 0 || l.kernel == 0 || l.stride == 0) {
                throw ConfigError("layer " + std::to_string(i) + " has a zero channel count, kernel or stride");
            }
            const Shape wshape = l.kind == LayerKind::conv ? Shape{l.out_channels, l.in_channels, l.kernel, l.kernel}
                                                           : Shape{l.in_channels, l.out_channels, l.kernel, l.kernel};
            Tensor w(wshape);
            if (rng) {
                double fan_in = static_cast<double>(l.in_channels * l.kernel * l.kernel);
                if (l.kind == LayerKind::conv_transpose) {
                    fan_in /= static_cast<double>(l.stride * l.stride);
                }
                const double stddev = std::sqrt(2.0 / fan_in);
                for (auto& v : w.values()) {
                    v = rng->normal(0.0, stddev);
                }
            }
            param_index_.push_back(static_cast<int>(params_.params.size()));
            params_.add(prefix + std::to_string(i) + ".weight", std::move(w));
            params_.add(prefix + std::to_string(i) + ".bias", Tensor({l.out_channels}));
        }
    }

    const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
    std::size_t size() const noexcept { return layers_.size(); }
    ParamSet& params() noexcept { return params_; }
    const ParamSet& params() const noexcept { return params_; }

    Tensor& weight(std::size_t layer) { return params_.params.at(index_of(layer)).value; }
    const Tensor& weight(std::size_t layer) const { return params_.params.at(index_of(layer)).value; }
    Tensor& bias(std::size_t layer) { return params_.params.at(index_of(layer) + 1).value; }
    const Tensor& bias(std::size_t layer) const { return params_.params.at(index_of(layer) + 1).value; }

    /// Run layers [from, size()) on `x`. When `trace` is given it records every layer input.
    Tensor forward(const Tensor& x, Trace* trace = nullptr, std::size_t from = 0) const
    {
        if (trace) {
            trace->caches.assign(layers_.size(), ConvCache{});
        }
        Tensor h = x;
        for (std::size_t i = from; i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            if (trace) {
                trace->caches[i].input = h;
            }
            switch (l.kind) {
            case LayerKind::conv:
                check_channels(h, l.in_channels, i);
                h = conv2d_forward(h, weight(i), bias(i), l.stride, l.padding);
                break;
            case LayerKind::conv_transpose:
                check_channels(h, l.in_channels, i);
                h = conv2d_transpose_forward(h, weight(i), bias(i), l.stride, l.padding);
                break;
            case LayerKind::relu:
                h = relu_forward(h);
                break;
            }
        }
        if (trace) {
            trace->output = h;
        }
        return h;
    }

    /// Gradient with respect to the input of layer `stop`, without touching parameter gradients.
    Tensor backward(const Trace& trace, const Tensor& grad_out, std::size_t stop = 0) const
    {
        Tensor g = grad_out;
        for (std::size_t i = layers_.size(); i-- > stop;) {
            g = layer_backward(trace, g, i, nullptr);
        }
        return g;
    }

    /// Full backward pass adding parameter gradients into params().grad. Returns the input gradient,
    /// or an empty tensor when `input_grad` is false and the first layer is a convolution.
    Tensor accumulate_backward(const Trace& trace, const Tensor& grad_out, bool input_grad = true)
    {
        Tensor g = grad_out;
        for (std::size_t i = layers_.size(); i-- > 0;) {
            g = layer_backward(trace, g, i, &params_, input_grad || i > 0);
        }
        return g;
    }

    /// Shape of each layer output for an input of shape CxHxW.
    std::vector<Shape> layer_shapes(Shape input) const
    {
        std::vector<Shape> shapes;
        Shape s = std::move(input);
        if (s.size() != 3) {
            throw ConfigError("layer_shapes expects a CxHxW input shape");
        }
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            if (l.kind == LayerKind::conv) {
                if (s[0] != l.in_channels) {
                    throw ConfigError("layer " + std::to_string(i) + " expects " + std::to_string(l.in_channels)
                                      + " channels, got " + std::to_string(s[0]));
                }
                s = {l.out_channels, detail::conv_extent(s[1], l.kernel, l.stride, l.padding, "height"),
                     detail::conv_extent(s[2], l.kernel, l.stride, l.padding, "width")};
            } else if (l.kind == LayerKind::conv_transpose) {
                if (s[0] != l.in_channels) {
                    throw ConfigError("layer " + std::to_string(i) + " expects " + std::to_string(l.in_channels)
                                      + " channels, got " + std::to_string(s[0]));
                }
                s = {l.out_channels, (s[1] - 1) * l.stride + l.kernel - 2 * l.padding,
                     (s[2] - 1) * l.stride + l.kernel - 2 * l.padding};
            }
            shapes.push_back(s);
        }
        return shapes;
    }

    /// Index of the last ReLU, or of the last layer when there is none.
    std::size_t last_activation_index() const
    {
        for (std::size_t i = layers_.size(); i-- > 0;) {
            if (layers_[i].kind == LayerKind::relu) {
                return i;
            }
        }
        return layers_.empty() ? 0 : layers_.size() - 1;
    }

private:
    std::size_t index_of(std::size_t layer) const
    {
        const int idx = param_index_.at(layer);
        if (idx < 0) {
            throw UsageError("layer " + std::to_string(layer) + " has no parameters");
        }
        return static_cast<std::size_t>(idx);
    }

    static void check_channels(const Tensor& h, std::size_t expected, std::size_t layer)
    {
        const std::size_t c = h.rank() == 4 ? h.dim(1) : h.dim(0);
        if (c != expected) {
            throw ConfigError("layer " + std::to_string(layer) + " expects " + std::to_string(expected)
                              + " input channels, got " + std::to_string(c));
        }
    }

    Tensor layer_backward(const Trace& trace, const Tensor& g, std::size_t i, ParamSet* accumulate,
                          bool input_grad = true) const
    {
        const auto& l = layers_[i];
        const ConvCache& cache = trace.caches.at(i);
        if (!cache.input) {
            throw UsageError("backward through layer " + std::to_string(i) + " without a forward cache");
        }
        if (l.kind == LayerKind::relu) {
            return relu_backward(g, *cache.input);
        }
        const bool want_params = accumulate != nullptr;
        ConvGrads grads = l.kind == LayerKind::conv
                              ? conv2d_backward(g, cache, weight(i), l.stride, l.padding, want_params, input_grad)
                              : conv2d_transpose_backward(g, cache, weight(i), l.stride, l.padding, want_params);
        if (accumulate) {
            const std::size_t idx = index_of(i);
            accumulate->params[idx].grad += grads.kernels;
            accumulate->params[idx + 1].grad += grads.bias;
        }
        return std::move(grads.input);
    }

    std::vector<LayerSpec> layers_;
    std::vector<int> param_index_;
    ParamSet params_;
};

} // namespace vqa

#endif
