#ifndef VQAUDIT_VQCODEC_HPP
#define VQAUDIT_VQCODEC_HPP

#include "image.hpp"
#include "network.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "tileworld.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <limits>
#include <set>
#include <string>
#include <vector>

namespace vqa {

/// Result of vector quantization for one latent grid (or a batch of grids).
struct QuantizedLatent {
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    std::vector<int> assignments; // (n, y, x) row-major
    Tensor z_e;
    Tensor z_q;

    /// Sorted distinct code ids of grid `n`.
    std::vector<int> selected_codes(std::size_t n = 0) const
    {
        const std::size_t per = grid_h * grid_w;
        std::vector<int> codes(assignments.begin() + static_cast<std::ptrdiff_t>(n * per),
                               assignments.begin() + static_cast<std::ptrdiff_t>((n + 1) * per));
        std::sort(codes.begin(), codes.end());
        codes.erase(std::unique(codes.begin(), codes.end()), codes.end());
        return codes;
    }
};

/// Nearest code under squared error for every latent position; ties go to the lowest index.
/// `z_e` is dxHxW or NxdxHxW, `codes` is Kxd.
inline QuantizedLatent quantize(const Tensor& z_e, const Tensor& codes)
{
    if (codes.rank() != 2) {
        throw ConfigError("codebook must be a KxD matrix, got " + shape_string(codes.shape()));
    }
    const bool batched = z_e.rank() == 4;
    if (!batched && z_e.rank() != 3) {
        throw ConfigError("quantize expects a dxHxW or NxdxHxW latent, got " + shape_string(z_e.shape()));
    }
    const std::size_t n = batched ? z_e.dim(0) : 1;
    const std::size_t d = z_e.dim(batched ? 1 : 0);
    const std::size_t h = z_e.dim(batched ? 2 : 1);
    const std::size_t w = z_e.dim(batched ? 3 : 2);
    const std::size_t k = codes.dim(0);
    if (codes.dim(1) != d) {
        throw ConfigError("latent depth " + std::to_string(d) + " does not match code dimension "
                          + std::to_string(codes.dim(1)));
    }
    if (!z_e.all_finite()) {
        throw NumericError("quantize: z_e contains non-finite values");
    }

    QuantizedLatent q;
    q.grid_h = h;
    q.grid_w = w;
    q.z_e = z_e;
    q.z_q = Tensor(z_e.shape());
    q.assignments.resize(n * h * w);
    const std::size_t hw = h * w;
    std::vector<double> v(d);
    for (std::size_t b = 0; b < n; ++b) {
        const double* base = z_e.data().data() + b * d * hw;
        double* out = q.z_q.data().data() + b * d * hw;
        for (std::size_t p = 0; p < hw; ++p) {
            for (std::size_t c = 0; c < d; ++c) {
                v[c] = base[c * hw + p];
            }
            std::size_t best = 0;
            double best_dist = std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < k; ++i) {
                const double* code = codes.data().data() + i * d;
                double dist = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    const double diff = v[c] - code[c];
                    dist += diff * diff;
                }
                if (dist < best_dist) {
                    best_dist = dist;
                    best = i;
                }
            }
            q.assignments[b * hw + p] = static_cast<int>(best);
            const double* code = codes.data().data() + best * d;
            for (std::size_t c = 0; c < d; ++c) {
                out[c * hw + p] = code[c];
            }
        }
    }
    return q;
}

struct Architecture {
    Shape input{3, 64, 64};
    std::vector<LayerSpec> encoder;
    std::vector<LayerSpec> decoder;
    std::size_t codebook_size = 64;
    std::size_t code_dim = 16;
};

inline void to_json(nlohmann::json& j, const Architecture& a)
{
    j = nlohmann::json{{"input", a.input},
                       {"encoder", a.encoder},
                       {"decoder", a.decoder},
                       {"codebook_size", a.codebook_size},
                       {"code_dim", a.code_dim}};
}

inline void from_json(const nlohmann::json& j, Architecture& a)
{
    a.input = j.at("input").get<Shape>();
    a.encoder = j.at("encoder").get<std::vector<LayerSpec>>();
    a.decoder = j.at("decoder").get<std::vector<LayerSpec>>();
    a.codebook_size = j.at("codebook_size").get<std::size_t>();
    a.code_dim = j.at("code_dim").get<std::size_t>();
}

/// Three stride-2 convolutions take a 64x64 frame to an 8x8 latent grid; the decoder mirrors them.
inline Architecture default_architecture(std::size_t codebook_size = 64, std::size_t code_dim = 16,
                                         std::size_t height = 64, std::size_t width = 64)
{
    Architecture a;
    a.input = {3, height, width};
    a.codebook_size = codebook_size;
    a.code_dim = code_dim;
    a.encoder = {LayerSpec::conv(3, 16, 4, 2, 1),  LayerSpec::relu(), LayerSpec::conv(16, 32, 4, 2, 1),
                 LayerSpec::relu(),                LayerSpec::conv(32, 32, 4, 2, 1), LayerSpec::relu(),
                 LayerSpec::conv(32, code_dim, 3, 1, 1)};
    a.decoder = {LayerSpec::conv_transpose(code_dim, 32, 3, 1, 1), LayerSpec::relu(),
                 LayerSpec::conv_transpose(32, 32, 4, 2, 1),       LayerSpec::relu(),
                 LayerSpec::conv_transpose(32, 16, 4, 2, 1),       LayerSpec::relu(),
                 LayerSpec::conv_transpose(16, 3, 4, 2, 1)};
    return a;
}

struct VQCodecModel {
    std::string kind = "trained";
    Architecture architecture;
    Sequential encoder;
    Sequential decoder;
    ParamSet codebook; // single parameter "codebook.codes", K x d
    std::uint64_t seed = 0;

    const Tensor& codes() const { return codebook.params.at(0).value; }
    Tensor& codes() { return codebook.params.at(0).value; }
    std::size_t codebook_size() const { return codes().dim(0); }
    std::size_t code_dim() const { return codes().dim(1); }

    /// (d, G_h, G_w) produced by the encoder.
    Shape latent_shape() const { return encoder.layer_shapes(architecture.input).back(); }

    /// Throws unless encoder output depth equals d and the decoder maps z_q back to the input shape.
    void check() const
    {
        const Shape latent = latent_shape();
        if (latent[0] != code_dim()) {
            throw ConfigError("encoder produces depth " + std::to_string(latent[0]) + " but codes have dimension "
                              + std::to_string(code_dim()));
        }
        const Shape out = decoder.layer_shapes(latent).back();
        if (out != architecture.input) {
            throw ConfigError("decoder output " + shape_string(out) + " differs from input "
                              + shape_string(architecture.input));
        }
    }
};

/// Randomly initialised model; codebook entries are drawn from N(0, 0.02^2).
inline VQCodecModel make_model(const Architecture& arch, std::uint64_t seed)
{
    if (arch.codebook_size == 0 || arch.code_dim == 0) {
        throw ConfigError("codebook size and code dimension must be positive");
    }
    VQCodecModel m;
    m.architecture = arch;
    m.seed = seed;
    Rng enc_rng(derive_seed(seed, 0));
    Rng dec_rng(derive_seed(seed, 1));
    Rng code_rng(derive_seed(seed, 2));
    m.encoder = Sequential(arch.encoder, "encoder.", &enc_rng);
    m.decoder = Sequential(arch.decoder, "decoder.", &dec_rng);
    Tensor codes({arch.codebook_size, arch.code_dim});
    for (auto& v : codes.values()) {
        v = code_rng.normal(0.0, 0.02);
    }
    m.codebook.add("codebook.codes", std::move(codes));
    m.check();
    return m;
}

inline Tensor encode(const VQCodecModel& model, const Tensor& frame) { return model.encoder.forward(frame); }

inline Tensor encode(const VQCodecModel& model, const RgbImage& frame)
{
    return model.encoder.forward(to_tensor(frame));
}

/// Unclamped reconstruction; use to_image() to render it.
inline Tensor decode(const VQCodecModel& model, const Tensor& z_q) { return model.decoder.forward(z_q); }

// --- training ------------------------------------------------------------------------------------

struct TrainConfig {
    std::size_t batch_size = 32;
    std::size_t steps = 5000;
    double learning_rate = 3e-4;
    double beta = 0.25;
    std::uint64_t seed = 0;
};

struct LossBreakdown {
    double reconstruction = 0.0;
    double codebook = 0.0;
    double commitment = 0.0;
    double beta = 0.25;

    double total() const { return reconstruction + codebook + beta * commitment; }
};

struct VqTermGrads {
    double codebook_loss = 0.0;   // mse(z_q, stopgrad(z_e))
    double commitment_loss = 0.0; // mse(z_e, stopgrad(z_q))
    Tensor grad_z_e;              // beta-weighted commitment gradient
    Tensor grad_codes;            // codebook-loss gradient, K x d
};

/// The two quantization terms and their gradients. Only codes that were selected receive gradient.
inline VqTermGrads vq_terms(const QuantizedLatent& q, const Tensor& codes, double beta)
{
    VqTermGrads r;
    const auto diff = mse_loss(q.z_e, q.z_q); // grad is 2 (z_e - z_q) / N
    r.codebook_loss = diff.loss;
    r.commitment_loss = diff.loss;
    r.grad_z_e = diff.grad;
    r.grad_z_e *= beta;
    r.grad_codes = Tensor(codes.shape());

    const Tensor& z = q.z_e;
    const bool batched = z.rank() == 4;
    const std::size_t n = batched ? z.dim(0) : 1;
    const std::size_t d = codes.dim(1);
    const std::size_t hw = q.grid_h * q.grid_w;
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t p = 0; p < hw; ++p) {
            const auto code = static_cast<std::size_t>(q.assignments[b * hw + p]);
            for (std::size_t c = 0; c < d; ++c) {
                const std::size_t idx = (b * d + c) * hw + p;
                r.grad_codes[code * d + c] -= diff.grad[idx];
            }
        }
    }
    return r;
}

namespace detail {

inline void require_finite(const Tensor& t, const char* name)
{
    if (!t.all_finite()) {
        throw NumericError(std::string("non-finite values in ") + name);
    }
}

} // namespace detail

/// Zeroes and fills the gradients of all three parameter sets for one batch (N x 3 x H x W).
/// The decoder gradient at z_q is copied unchanged to z_e (straight-through).
inline LossBreakdown compute_gradients(VQCodecModel& model, const Tensor& batch, double beta)
{
    if (batch.rank() != 4 || batch.dim(0) == 0) {
        throw ConfigError("training batch must be a nonempty NxCxHxW tensor");
    }
    detail::require_finite(batch, "input batch");
    model.encoder.params().zero_grad();
    model.decoder.params().zero_grad();
    model.codebook.zero_grad();

    Trace enc_trace;
    const Tensor z_e = model.encoder.forward(batch, &enc_trace);
    detail::require_finite(z_e, "encoder output z_e");
    const QuantizedLatent q = quantize(z_e, model.codes());
    Trace dec_trace;
    const Tensor recon = model.decoder.forward(q.z_q, &dec_trace);
    detail::require_finite(recon, "decoder output");

    const auto rec = mse_loss(recon, batch);
    const VqTermGrads vq = vq_terms(q, model.codes(), beta);
    LossBreakdown losses{rec.loss, vq.codebook_loss, vq.commitment_loss, beta};
    if (!std::isfinite(losses.total())) {
        throw NumericError("non-finite loss");
    }

    Tensor grad_z = model.decoder.accumulate_backward(dec_trace, rec.grad);
    grad_z += vq.grad_z_e;
    model.encoder.accumulate_backward(enc_trace, grad_z, false);
    model.codebook.params[0].grad += vq.grad_codes;

    detail::require_finite(model.codebook.params[0].grad, "codebook gradient");
    for (const auto* set : {&model.encoder.params(), &model.decoder.params()}) {
        for (const auto& p : set->params) {
            if (!p.grad.all_finite()) {
                throw NumericError("non-finite gradient for " + p.name);
            }
        }
    }
    return losses;
}

/// One optimisation step on a batch; every parameter set is updated with Adam.
inline LossBreakdown training_step(VQCodecModel& model, const Tensor& batch, const TrainConfig& cfg)
{
    const LossBreakdown losses = compute_gradients(model, batch, cfg.beta);
    const AdamConfig adam{cfg.learning_rate};
    adam_step(model.encoder.params(), adam);
    adam_step(model.decoder.params(), adam);
    adam_step(model.codebook, adam);
    return losses;
}

/// Trains on `images` (3xHxW tensors) with shuffled epochs. `on_step(step, losses)` is optional.
inline std::vector<LossBreakdown> train(VQCodecModel& model, std::span<const Tensor> images, const TrainConfig& cfg,
                                        const std::function<void(std::size_t, const LossBreakdown&)>& on_step = {})
{
    if (images.empty()) {
        throw ConfigError("no training images");
    }
    if (cfg.steps == 0 || cfg.batch_size == 0 || cfg.beta < 0.0) {
        throw ConfigError("training needs steps >= 1, batch size >= 1 and beta >= 0");
    }
    Rng rng(derive_seed(cfg.seed, 17));
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();
    std::vector<LossBreakdown> history;
    history.reserve(cfg.steps);
    std::vector<Tensor> batch;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        batch.clear();
        while (batch.size() < cfg.batch_size) {
            if (cursor == order.size()) {
                shuffle(order, rng);
                cursor = 0;
            }
            batch.push_back(images[order[cursor++]]);
        }
        history.push_back(training_step(model, stack(batch), cfg));
        if (on_step) {
            on_step(step, history.back());
        }
    }
    return history;
}

/// Mean squared reconstruction error over `images`, evaluated in batches.
inline double reconstruction_mse(const VQCodecModel& model, std::span<const Tensor> images, std::size_t batch_size = 32)
{
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < images.size(); i += batch_size) {
        const auto chunk = images.subspan(i, std::min(batch_size, images.size() - i));
        const Tensor x = stack(chunk);
        const Tensor z = model.encoder.forward(x);
        const Tensor recon = model.decoder.forward(quantize(z, model.codes()).z_q);
        total += mse_loss(recon, x).loss * static_cast<double>(x.size());
        count += x.size();
    }
    return total / static_cast<double>(count);
}

// --- oracle model --------------------------------------------------------------------------------

/// A distinct 8x8 cell appearance the renderer can produce.
struct CellClass {
    std::string name;
    std::uint8_t label = 0; // entity id the class stands for
    RgbImage pixels;        // 8x8
};

/// Every cell appearance: the 7 tiles (ids 0..6 keep their tile id), the agent over each walkable
/// tile, the HUD item icons, the ten digits and the blank HUD cell.
inline std::vector<CellClass> oracle_cell_classes()
{
    using namespace tileworld;
    std::vector<CellClass> classes;
    const auto cell_of = [](const Observation& obs, std::size_t row, std::size_t col) {
        RgbImage img(kCell, kCell);
        for (std::size_t y = 0; y < kCell; ++y) {
            for (std::size_t x = 0; x < kCell; ++x) {
                for (std::size_t c = 0; c < 3; ++c) {
                    img.at(y, x, c) = obs.frame.at(row * kCell + y, col * kCell + x, c);
                }
            }
        }
        return img;
    };
    for (std::uint8_t t = 0; t < kTileTypeCount; ++t) {
        const Observation obs = render(TileGrid(1, 1, t), std::nullopt, {});
        classes.push_back({std::string(kEntityNames[t]), t, cell_of(obs, 0, 0)});
    }
    for (std::uint8_t t = 0; t < kTileTypeCount; ++t) {
        if (!walkable(t)) {
            continue;
        }
        const Observation obs = render(TileGrid(1, 1, t), Position{0, 0}, {});
        classes.push_back({"agent_on_" + std::string(kEntityNames[t]), agent, cell_of(obs, 0, 0)});
    }
    // A grid as wide as the HUD layout exposes every icon; digits come from varying the counts.
    const std::size_t hud_cols = 2 * kItemCount + 1;
    for (std::size_t item = 0; item < kItemCount; ++item) {
        const Observation obs = render(TileGrid(1, hud_cols, grass), std::nullopt, {});
        classes.push_back({"icon" + std::to_string(item), hud, cell_of(obs, 1, 2 * item)});
    }
    for (std::uint8_t d = 0; d < 10; ++d) {
        const Observation obs = render(TileGrid(1, hud_cols, grass), std::nullopt, HudState{d, 0, 0});
        classes.push_back({"digit" + std::to_string(d), static_cast<std::uint8_t>(digit0 + d), cell_of(obs, 1, 1)});
    }
    {
        const Observation obs = render(TileGrid(1, hud_cols, grass), std::nullopt, {});
        classes.push_back({"hud_blank", hud, cell_of(obs, 1, hud_cols - 1)});
    }
    return classes;
}

/// Class index of every cell of an observation, computed from the world state rather than pixels.
inline std::vector<int> oracle_expected_assignments(const tileworld::TileGrid& grid, const tileworld::Position& agent_pos,
                                                    const tileworld::HudState& hud_state)
{
    using namespace tileworld;
    const auto classes = oracle_cell_classes();
    const auto index_of = [&](const std::string& name) {
        for (std::size_t i = 0; i < classes.size(); ++i) {
            if (classes[i].name == name) {
                return static_cast<int>(i);
            }
        }
        throw UsageError("unknown cell class " + name);
    };
    std::vector<int> out;
    for (std::size_t r = 0; r < grid.rows; ++r) {
        for (std::size_t c = 0; c < grid.cols; ++c) {
            const auto t = grid.at(r, c);
            const bool here = agent_pos.row == static_cast<int>(r) && agent_pos.col == static_cast<int>(c);
            out.push_back(here ? index_of("agent_on_" + std::string(kEntityNames[t])) : static_cast<int>(t));
        }
    }
    for (std::size_t c = 0; c < grid.cols; ++c) {
        const HudCell cell = hud_cell(hud_state, c);
        switch (cell.kind) {
        case HudCell::Kind::blank:
            out.push_back(index_of("hud_blank"));
            break;
        case HudCell::Kind::icon:
            out.push_back(index_of("icon" + std::to_string(cell.value)));
            break;
        case HudCell::Kind::digit:
            out.push_back(index_of("digit" + std::to_string(cell.value)));
            break;
        }
    }
    return out;
}

/// Hand-built codec whose latent cells align with the 8x8 render cells.
///
/// Encoder: an 8x8/stride-8 conv holding the dual basis of the cell templates turns each cell
/// into an exact one-hot class indicator; a transposed conv paints that indicator over the
/// 6x6 interior of the cell (the Grad-CAM target layer); a final 8x8/stride-8 conv pools the
/// interior into z_e = (1 - shrink) * e_class. Codes are the unit vectors, so the nearest code is
/// the cell class and z_e sits strictly inside it, giving a nonzero target gradient.
/// Decoder: a transposed conv whose kernel for code k is template k, so reconstruction is exact.
inline VQCodecModel build_oracle_model(std::size_t rows = 7, std::size_t cols = 8)
{
    using tileworld::kCell;
    const auto classes = oracle_cell_classes();
    const std::size_t k = classes.size();
    const std::size_t tdim = 3 * kCell * kCell;
    constexpr double shrink = 0.5;

    Eigen::MatrixXd templates(static_cast<Eigen::Index>(tdim), static_cast<Eigen::Index>(k));
    for (std::size_t i = 0; i < k; ++i) {
        const Tensor t = to_tensor(classes[i].pixels);
        for (std::size_t j = 0; j < tdim; ++j) {
            templates(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = t[j];
        }
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(templates);
    if (static_cast<std::size_t>(lu.rank()) != k) {
        throw ConfigError("cell templates are linearly dependent; the oracle cannot separate them");
    }
    const Eigen::MatrixXd gram = templates.transpose() * templates;
    const Eigen::MatrixXd dual = gram.ldlt().solve(templates.transpose()); // k x tdim, dual * templates = I

    VQCodecModel m;
    m.kind = "oracle";
    m.architecture.input = {3, (rows + 1) * kCell, cols * kCell};
    m.architecture.codebook_size = k;
    m.architecture.code_dim = k;
    m.architecture.encoder = {LayerSpec::conv(3, k, kCell, kCell, 0), LayerSpec::relu(),
                              LayerSpec::conv_transpose(k, k, kCell, kCell, 0), LayerSpec::relu(),
                              LayerSpec::conv(k, k, kCell, kCell, 0)};
    m.architecture.decoder = {LayerSpec::conv_transpose(k, 3, kCell, kCell, 0)};
    m.encoder = Sequential(m.architecture.encoder, "encoder.");
    m.decoder = Sequential(m.architecture.decoder, "decoder.");

    const auto interior = [](std::size_t y, std::size_t x) { return y >= 1 && y + 1 < kCell && x >= 1 && x + 1 < kCell; };
    const double interior_area = static_cast<double>((kCell - 2) * (kCell - 2));

    Tensor& w0 = m.encoder.weight(0);
    for (std::size_t o = 0; o < k; ++o) {
        for (std::size_t j = 0; j < tdim; ++j) {
            w0[o * tdim + j] = 2.0 * dual(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(j));
        }
    }
    m.encoder.bias(0).fill(-1.0);

    Tensor& w2 = m.encoder.weight(2);
    for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t y = 0; y < kCell; ++y) {
            for (std::size_t x = 0; x < kCell; ++x) {
                w2.at(c, c, y, x) = interior(y, x) ? 1.0 : 0.0;
            }
        }
    }

    Tensor& w4 = m.encoder.weight(4);
    for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t y = 0; y < kCell; ++y) {
            for (std::size_t x = 0; x < kCell; ++x) {
                w4.at(c, c, y, x) = interior(y, x) ? (1.0 - shrink) / interior_area : 0.0;
            }
        }
    }

    Tensor& wd = m.decoder.weight(0);
    for (std::size_t c = 0; c < k; ++c) {
        const Tensor t = to_tensor(classes[c].pixels);
        std::copy(t.values().begin(), t.values().end(), wd.values().begin() + static_cast<std::ptrdiff_t>(c * tdim));
    }

    Tensor codes({k, k});
    for (std::size_t c = 0; c < k; ++c) {
        codes[c * k + c] = 1.0;
    }
    m.codebook.add("codebook.codes", std::move(codes));
    m.check();
    return m;
}

// --- checkpoints ---------------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'V', 'Q', 'A', 'U', 'D', 'I', 'T', '1'};
inline constexpr int kCheckpointFormat = 1;

namespace detail {

inline std::vector<const Param*> checkpoint_params(const VQCodecModel& m)
{
    std::vector<const Param*> out;
    for (const auto& p : m.encoder.params().params) {
        out.push_back(&p);
    }
    for (const auto& p : m.decoder.params().params) {
        out.push_back(&p);
    }
    out.push_back(&m.codebook.params.at(0));
    return out;
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v)
{
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

} // namespace detail

/// Magic, little-endian u64 header length, JSON header, then float32 tensors in header order.
inline std::vector<std::uint8_t> serialize_checkpoint(const VQCodecModel& model)
{
    std::vector<std::uint8_t> payload;
    nlohmann::json tensors = nlohmann::json::array();
    for (const Param* p : detail::checkpoint_params(model)) {
        tensors.push_back({{"name", p->name}, {"shape", p->value.shape()}});
        for (double v : p->value.values()) {
            const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
            for (int i = 0; i < 4; ++i) {
                payload.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
            }
        }
    }
    const nlohmann::json header = {{"format", kCheckpointFormat},
                                   {"kind", model.kind},
                                   {"architecture", model.architecture},
                                   {"codebook_size", model.codebook_size()},
                                   {"code_dim", model.code_dim()},
                                   {"seed", model.seed},
                                   {"tensors", tensors},
                                   {"payload_bytes", payload.size()},
                                   {"checksum", crc32_hex(crc32_of(payload))}};
    const std::string text = header.dump();
    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    detail::put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

inline VQCodecModel deserialize_checkpoint(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < 16 || !std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic), bytes.begin(),
                                         [](char a, std::uint8_t b) { return static_cast<std::uint8_t>(a) == b; })) {
        throw LoadError("checkpoint magic mismatch (expected VQAUDIT1)");
    }
    std::uint64_t header_len = 0;
    for (int i = 0; i < 8; ++i) {
        header_len |= static_cast<std::uint64_t>(bytes[8 + static_cast<std::size_t>(i)]) << (8 * i);
    }
    if (header_len > bytes.size() - 16) {
        throw LoadError("checkpoint truncated inside its header");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    if (header.value("format", 0) != kCheckpointFormat) {
        throw LoadError("unsupported checkpoint format version");
    }
    const auto payload = bytes.subspan(16 + header_len);
    const auto expected_bytes = header.at("payload_bytes").get<std::size_t>();
    if (payload.size() != expected_bytes) {
        throw LoadError("checkpoint payload has " + std::to_string(payload.size()) + " bytes, header says "
                        + std::to_string(expected_bytes) + " (truncated?)");
    }
    if (crc32_hex(crc32_of(payload)) != header.at("checksum").get<std::string>()) {
        throw LoadError("checkpoint checksum mismatch");
    }

    VQCodecModel m;
    m.kind = header.at("kind").get<std::string>();
    m.seed = header.at("seed").get<std::uint64_t>();
    m.architecture = header.at("architecture").get<Architecture>();
    m.encoder = Sequential(m.architecture.encoder, "encoder.");
    m.decoder = Sequential(m.architecture.decoder, "decoder.");
    m.codebook.add("codebook.codes", Tensor({header.at("codebook_size").get<std::size_t>(),
                                              header.at("code_dim").get<std::size_t>()}));

    std::vector<Param*> targets;
    for (auto& p : m.encoder.params().params) {
        targets.push_back(&p);
    }
    for (auto& p : m.decoder.params().params) {
        targets.push_back(&p);
    }
    targets.push_back(&m.codebook.params[0]);
    const auto& listed = header.at("tensors");
    if (listed.size() != targets.size()) {
        throw LoadError("checkpoint lists " + std::to_string(listed.size()) + " tensors, architecture needs "
                        + std::to_string(targets.size()));
    }
    std::size_t offset = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        Param& p = *targets[i];
        if (listed[i].at("name").get<std::string>() != p.name || listed[i].at("shape").get<Shape>() != p.value.shape()) {
            throw LoadError("checkpoint tensor " + std::to_string(i) + " does not match parameter " + p.name);
        }
        if (offset + 4 * p.value.size() > payload.size()) {
            throw LoadError("checkpoint payload too short for " + p.name);
        }
        for (auto& v : p.value.values()) {
            std::uint32_t bitsv = 0;
            for (int b = 0; b < 4; ++b) {
                bitsv |= static_cast<std::uint32_t>(payload[offset + static_cast<std::size_t>(b)]) << (8 * b);
            }
            v = static_cast<double>(std::bit_cast<float>(bitsv));
            offset += 4;
        }
    }
    try {
        m.check();
    } catch (const ConfigError& e) {
        throw LoadError(std::string("checkpoint architecture is inconsistent: ") + e.what());
    }
    return m;
}

inline void save_checkpoint(const VQCodecModel& model, const std::filesystem::path& path)
{
    write_file_bytes(path, serialize_checkpoint(model));
}

inline VQCodecModel load_checkpoint(const std::filesystem::path& path)
{
    return deserialize_checkpoint(read_file_bytes(path));
}

} // namespace vqa

#endif
