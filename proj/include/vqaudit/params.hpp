#ifndef VQAUDIT_PARAMS_HPP
#define VQAUDIT_PARAMS_HPP

#include "tensor.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace vqa {

/// A trainable tensor with its gradient and Adam moments, all of identical shape.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor first_moment;
    Tensor second_moment;

    Param(std::string n, Tensor v)
        : name(std::move(n))
        , value(std::move(v))
        , grad(value.shape())
        , first_moment(value.shape())
        , second_moment(value.shape())
    {
    }
};

struct ParamSet {
    std::vector<Param> params;
    std::int64_t step = 0;

    Param& add(std::string name, Tensor value) { return params.emplace_back(std::move(name), std::move(value)); }

    Param* find(const std::string& name)
    {
        for (auto& p : params) {
            if (p.name == name) {
                return &p;
            }
        }
        return nullptr;
    }

    const Param* find(const std::string& name) const { return const_cast<ParamSet*>(this)->find(name); }

    void zero_grad()
    {
        for (auto& p : params) {
            p.grad.fill(0.0);
        }
    }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& p : params) {
            n += p.value.size();
        }
        return n;
    }
};

struct AdamConfig {
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// One bias-corrected Adam update of every parameter in the set, in place.
inline void adam_step(ParamSet& set, const AdamConfig& cfg)
{
    if (!(cfg.learning_rate > 0.0)) {
        throw ConfigError("Adam learning rate must be positive");
    }
    if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0) || !(cfg.epsilon > 0.0)) {
        throw ConfigError("Adam betas must lie in [0, 1) and epsilon must be positive");
    }
    ++set.step;
    const double t = static_cast<double>(set.step);
    const double correction1 = 1.0 - std::pow(cfg.beta1, t);
    const double correction2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& p : set.params) {
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            p.first_moment[i] = cfg.beta1 * p.first_moment[i] + (1.0 - cfg.beta1) * g;
            p.second_moment[i] = cfg.beta2 * p.second_moment[i] + (1.0 - cfg.beta2) * g * g;
            const double m_hat = p.first_moment[i] / correction1;
            const double v_hat = p.second_moment[i] / correction2;
            p.value[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
        }
    }
}

} // namespace vqa

#endif
