#ifndef VQAUDIT_PROJECTION_HPP
#define VQAUDIT_PROJECTION_HPP

#include "errors.hpp"
#include "rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace vqa {

struct Calibration {
    double beta = 1.0;              // precision 1 / (2 sigma^2)
    std::vector<double> probabilities;
    double entropy_bits = 0.0;
    std::size_t iterations = 0;
    bool converged = false;

    double sigma() const { return std::sqrt(1.0 / (2.0 * beta)); }
};

namespace detail {

/// Conditional probabilities exp(-beta d) / sum and their entropy in bits. Shifted by the minimum
/// distance so the largest weight is exactly 1.
inline double conditional_row(std::span<const double> sq, double beta, std::vector<double>& p)
{
    const double dmin = *std::min_element(sq.begin(), sq.end());
    double z = 0.0;
    for (std::size_t j = 0; j < sq.size(); ++j) {
        p[j] = std::exp(-beta * (sq[j] - dmin));
        z += p[j];
    }
    double h = 0.0;
    for (double& v : p) {
        v /= z;
        if (v > 0.0) {
            h -= v * std::log2(v);
        }
    }
    return h;
}

} // namespace detail

/// Bisection on the Gaussian precision so that 2^H matches `perplexity` within 1e-3 * perplexity.
/// `sq_dists` holds the squared distances from one point to each of the others.
inline Calibration perplexity_calibrate(std::span<const double> sq_dists, double perplexity,
                                        std::size_t max_iterations = 100)
{
    if (sq_dists.empty()) {
        throw ConfigError("perplexity calibration needs at least one neighbour");
    }
    if (!(perplexity >= 1.0) || perplexity > static_cast<double>(sq_dists.size()) + 1.0) {
        throw ConfigError("perplexity " + std::to_string(perplexity) + " not attainable with "
                          + std::to_string(sq_dists.size()) + " neighbours");
    }
    if (sq_dists.size() >= 2 && std::all_of(sq_dists.begin(), sq_dists.end(), [](double d) { return d == 0.0; })) {
        throw ConfigError("all points in a perplexity row coincide; deduplicate or jitter them first");
    }
    Calibration c;
    c.probabilities.assign(sq_dists.size(), 0.0);
    const double target = std::log2(perplexity);
    const double tol = 1e-3 * perplexity;
    double lo = 0.0, hi = std::numeric_limits<double>::infinity();
    // Start near the scale of the distances so few halvings are needed.
    double mean = 0.0;
    for (double d : sq_dists) {
        mean += d;
    }
    mean /= static_cast<double>(sq_dists.size());
    c.beta = mean > 0.0 ? 1.0 / mean : 1.0;
    for (c.iterations = 1; c.iterations <= max_iterations; ++c.iterations) {
        c.entropy_bits = detail::conditional_row(sq_dists, c.beta, c.probabilities);
        if (std::abs(std::exp2(c.entropy_bits) - perplexity) <= tol) {
            c.converged = true;
            return c;
        }
        if (c.entropy_bits > target) { // too flat: sharpen
            lo = c.beta;
            c.beta = std::isinf(hi) ? c.beta * 2.0 : 0.5 * (c.beta + hi);
        } else {
            hi = c.beta;
            c.beta = 0.5 * (c.beta + lo);
        }
    }
    c.iterations = max_iterations;
    return c;
}

/// Symmetrized joint probabilities (P + P^T) / (2n) from row-major conditionals, with off-diagonal
/// entries floored at 1e-12 and renormalized to sum 1.
inline std::vector<double> joint_probabilities(std::span<const double> conditional, std::size_t n)
{
    if (conditional.size() != n * n) {
        throw ConfigError("conditional matrix must be n x n");
    }
    std::vector<double> p(n * n, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) {
                continue;
            }
            const double v = std::max(1e-12, (conditional[i * n + j] + conditional[j * n + i]) / (2.0 * static_cast<double>(n)));
            p[i * n + j] = v;
            total += v;
        }
    }
    for (double& v : p) {
        v /= total;
    }
    return p;
}

struct TsneConfig {
    double perplexity = 30.0;
    std::size_t iterations = 1000;
    double learning_rate = 200.0;
    double initial_momentum = 0.5;
    double final_momentum = 0.8;
    std::size_t momentum_switch = 250;
    double exaggeration = 12.0;
    std::size_t exaggeration_iterations = 250;
    double min_gain = 0.01;
    std::uint64_t seed = 0;
    std::optional<std::vector<double>> initial; // n x 2 row-major; default N(0, (1e-4)^2)
};

struct EmbeddingLayout {
    std::size_t n = 0;
    std::vector<double> coords; // n x 2 row-major
    std::vector<int> labels;
    double kl = 0.0;
    std::vector<double> kl_history; // KL(P || Q) after each iteration, without exaggeration

    double x(std::size_t i) const { return coords[2 * i]; }
    double y(std::size_t i) const { return coords[2 * i + 1]; }
};

namespace detail {

inline std::vector<double> squared_distances(const std::vector<std::vector<double>>& x)
{
    const std::size_t n = x.size();
    std::vector<double> d(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < x[i].size(); ++k) {
                const double t = x[i][k] - x[j][k];
                s += t * t;
            }
            d[i * n + j] = d[j * n + i] = s;
        }
    }
    return d;
}

/// Every repeat of an earlier row gets independent N(0, 1e-18) noise per component.
inline std::size_t jitter_duplicates(std::vector<std::vector<double>>& x, Rng& rng)
{
    std::map<std::vector<double>, std::size_t> seen;
    std::size_t jittered = 0;
    for (auto& row : x) {
        if (seen.emplace(row, 0).second) {
            continue;
        }
        for (double& v : row) {
            v += 1e-9 * rng.normal();
        }
        ++jittered;
    }
    return jittered;
}

} // namespace detail

/// Affinity matrix P for a descriptor set, after duplicate jitter.
inline std::vector<double> tsne_affinities(std::vector<std::vector<double>> x, double perplexity, Rng& rng)
{
    const std::size_t n = x.size();
    detail::jitter_duplicates(x, rng);
    const std::vector<double> d = detail::squared_distances(x);
    std::vector<double> cond(n * n, 0.0);
    std::vector<double> row(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0, k = 0; j < n; ++j) {
            if (j != i) {
                row[k++] = d[i * n + j];
            }
        }
        const Calibration c = perplexity_calibrate(row, perplexity);
        for (std::size_t j = 0, k = 0; j < n; ++j) {
            if (j != i) {
                cond[i * n + j] = c.probabilities[k++];
            }
        }
    }
    return joint_probabilities(cond, n);
}

/// KL(P || Q) for a layout, with Q the normalized Student-t affinities.
inline double kl_divergence(std::span<const double> p, std::span<const double> coords)
{
    const std::size_t n = coords.size() / 2;
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) {
                const double dx = coords[2 * i] - coords[2 * j], dy = coords[2 * i + 1] - coords[2 * j + 1];
                z += 1.0 / (1.0 + dx * dx + dy * dy);
            }
        }
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double pij = p[i * n + j];
            if (j != i && pij > 0.0) {
                const double dx = coords[2 * i] - coords[2 * j], dy = coords[2 * i + 1] - coords[2 * j + 1];
                kl += pij * std::log(pij * z * (1.0 + dx * dx + dy * dy));
            }
        }
    }
    return kl;
}

/// Exact t-SNE: gradient descent with momentum and per-point gains on KL(P || Q), Student-t output
/// affinities.
inline EmbeddingLayout tsne(const std::vector<std::vector<double>>& descriptors, std::vector<int> labels,
                            const TsneConfig& cfg = {})
{
    const std::size_t n = descriptors.size();
    if (n < 5) {
        throw ConfigError("t-SNE needs at least 5 points, got " + std::to_string(n));
    }
    if (!(cfg.perplexity < static_cast<double>(n) / 3.0)) {
        throw ConfigError("perplexity must be below n/3 (n = " + std::to_string(n) + ")");
    }
    if (!labels.empty() && labels.size() != n) {
        throw ConfigError("one label per point is required");
    }
    for (const auto& d : descriptors) {
        if (d.size() != descriptors[0].size()) {
            throw ConfigError("descriptors differ in dimension");
        }
    }

    Rng rng(cfg.seed);
    const std::vector<double> p = tsne_affinities(descriptors, cfg.perplexity, rng);

    EmbeddingLayout out;
    out.n = n;
    out.labels = std::move(labels);
    std::vector<double>& y = out.coords;
    if (cfg.initial) {
        if (cfg.initial->size() != 2 * n) {
            throw ConfigError("initial layout must be n x 2");
        }
        y = *cfg.initial;
    } else {
        y.resize(2 * n);
        for (double& v : y) {
            v = 1e-4 * rng.normal();
        }
    }

    std::vector<double> velocity(2 * n, 0.0), grad(2 * n), num(n * n, 0.0), gains(n, 1.0);
    double plogp = 0.0;
    for (double v : p) {
        if (v > 0.0) {
            plogp += v * std::log(v);
        }
    }
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        const double exaggeration = it < cfg.exaggeration_iterations ? cfg.exaggeration : 1.0;
        const double momentum = it < cfg.momentum_switch ? cfg.initial_momentum : cfg.final_momentum;
        if (it == cfg.exaggeration_iterations) {
            // Fresh optimizer state for the unexaggerated objective; carrying the exaggerated-phase
            // velocity and gains over makes small problems diverge.
            std::fill(velocity.begin(), velocity.end(), 0.0);
            std::fill(gains.begin(), gains.end(), 1.0);
        }

        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                const double dx = y[2 * i] - y[2 * j], dy = y[2 * i + 1] - y[2 * j + 1];
                const double w = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = num[j * n + i] = w;
                z += 2.0 * w;
            }
        }
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double gx = 0.0, gy = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) {
                    continue;
                }
                const double w = num[i * n + j];
                const double m = (exaggeration * p[i * n + j] - w / z) * w;
                gx += m * (y[2 * i] - y[2 * j]);
                gy += m * (y[2 * i + 1] - y[2 * j + 1]);
            }
            grad[2 * i] = 4.0 * gx;
            grad[2 * i + 1] = 4.0 * gy;
        }
        // KL for the layout the gradient was taken at.
        double cross = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                if (j != i && p[i * n + j] > 0.0) {
                    cross += p[i * n + j] * std::log(num[i * n + j] / z);
                }
            }
        }
        const double kl = plogp - cross;

        double cx = 0.0, cy = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            // Per-point step gain: grows while the gradient keeps opposing the current velocity.
            // One gain for both axes keeps the update rotation-equivariant.
            const double agree = grad[2 * i] * velocity[2 * i] + grad[2 * i + 1] * velocity[2 * i + 1];
            gains[i] = std::max(cfg.min_gain, agree < 0.0 ? gains[i] + 0.2 : gains[i] * 0.8);
            for (std::size_t k = 0; k < 2; ++k) {
                velocity[2 * i + k] =
                    momentum * velocity[2 * i + k] - cfg.learning_rate * gains[i] * grad[2 * i + k];
                y[2 * i + k] += velocity[2 * i + k];
            }
            cx += y[2 * i];
            cy += y[2 * i + 1];
        }
        cx /= static_cast<double>(n);
        cy /= static_cast<double>(n);
        bool finite = std::isfinite(kl);
        for (std::size_t i = 0; i < n; ++i) {
            y[2 * i] -= cx;
            y[2 * i + 1] -= cy;
            finite = finite && std::isfinite(y[2 * i]) && std::isfinite(y[2 * i + 1]);
        }
        if (!finite) {
            throw NumericError("t-SNE produced a non-finite value at iteration " + std::to_string(it));
        }
        out.kl_history.push_back(kl);
    }
    out.kl = kl_divergence(p, y);
    return out;
}

} // namespace vqa

#endif
