#ifndef VQAUDIT_AUDIT_HPP
#define VQAUDIT_AUDIT_HPP

#include "codestats.hpp"
#include "embedder.hpp"
#include "errors.hpp"
#include "projection.hpp"
#include "regions.hpp"
#include "saliency.hpp"
#include "tileworld.hpp"
#include "vqcodec.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

namespace vqa {

struct AuditConfig {
    double act_threshold = 0.5;
    std::size_t area_threshold = 9;
    int connectivity = 8;
    EmbedderKind embedder = EmbedderKind::descriptor;
    std::size_t baseline_trials = 10;
    std::size_t tsne_top_k = 10;
    std::size_t tsne_min_count = 50;
    std::size_t tsne_max_points_per_code = 100;
    double perplexity = 30.0;
    std::size_t tsne_iterations = 1000;
    std::size_t workers = 1;
    std::uint64_t seed = 0;
    SaliencyConfig saliency;
    std::size_t gallery_size = 8;
    std::size_t overlays_per_code = 1;
    // Also compute heatmaps for codes absent from an observation; they must all be zero.
    bool check_unselected = false;
};

// Observations are dealt to workers in fixed-size blocks and merged in block order, so results do not
// depend on the worker count.
inline constexpr std::size_t kAuditBlock = 32;

/// A crop without its pixels: enough to trace it back to one component of one kept heatmap.
struct CropRef {
    int code = 0;
    std::size_t episode = 0;
    std::size_t step = 0;
    BoundingBox bbox;
    std::size_t area = 0;
    int label = 0;
    bool flat = false;
};

struct TsnePoint {
    int code = 0;
    std::size_t episode = 0;
    std::size_t step = 0;
    std::vector<double> descriptor;
};

struct OverlaySample {
    std::size_t observation = 0; // index into the audited observation list
    Heatmap heatmap;
};

struct CodeAudit {
    int code = 0;
    std::size_t selections = 0;   // latent positions assigned this code
    std::size_t observations = 0; // observations selecting it
    std::size_t heatmaps = 0;
    std::size_t kept = 0;
    std::size_t dropped = 0;
    std::size_t crops = 0;
    std::optional<ConsistencyResult> consistency;
    PurityEntry purity;
};

struct AuditBundle {
    AuditConfig config;
    std::size_t codebook_size = 0;
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    std::size_t image_h = 0;
    std::size_t image_w = 0;
    std::size_t observations = 0;

    std::size_t pairs = 0; // (observation, selected code)
    std::size_t kept = 0;
    std::size_t dropped = 0;
    double zero_fraction = 0.0;
    std::size_t unselected_checked = 0;
    std::size_t unselected_nonzero = 0;

    CodeUsage usage;
    CooccurrenceMatrix cooccurrence;
    std::vector<CodeAudit> codes; // one per codebook entry
    std::vector<CropRef> crops;   // sorted by (code, episode, step), components in raster order

    std::optional<BaselineResult> baseline;
    std::size_t ranked_codes = 0; // codes with at least two descriptors
    std::optional<double> median_consistency;
    std::optional<double> best_consistency;
    int best_code = -1;

    std::vector<int> projected_codes;
    std::vector<TsnePoint> tsne_points;
    std::optional<EmbeddingLayout> layout;
    double tsne_perplexity = 0.0;
    std::string tsne_note;

    std::vector<std::vector<RgbImage>> galleries;
    std::vector<std::vector<OverlaySample>> overlays;
    std::vector<RgbImage> overlay_frames; // frames referenced by overlays, by observation index
    std::vector<std::size_t> overlay_frame_index;

    std::string dataset_checksum;
    std::string model_checksum;

    std::optional<double> median_gap() const
    {
        if (!median_consistency || !baseline) {
            return std::nullopt;
        }
        return *median_consistency - baseline->mean;
    }

    std::optional<double> best_gap() const
    {
        if (!best_consistency || !baseline) {
            return std::nullopt;
        }
        return *best_consistency - baseline->mean;
    }
};

struct ObservationRef {
    std::size_t episode = 0;
    std::size_t step = 0;
    const tileworld::Observation* obs = nullptr;
};

namespace detail {

struct BlockResult {
    explicit BlockResult(std::size_t k)
        : freq(k)
        , acc(k)
        , labels(k)
        , heatmaps(k, 0)
        , kept(k, 0)
        , dropped(k, 0)
        , points(k)
        , gallery(k)
        , overlays(k)
    {
    }

    FrequencyCounter freq;
    std::vector<std::vector<int>> code_sets;
    std::vector<std::size_t> episodes;
    std::vector<ConsistencyAccumulator> acc;
    std::vector<std::vector<int>> labels;
    std::vector<std::size_t> heatmaps, kept, dropped;
    std::vector<CropRef> crops;
    std::vector<CropSize> sizes;
    std::vector<std::vector<TsnePoint>> points;
    std::vector<std::vector<RgbImage>> gallery;
    std::vector<std::vector<OverlaySample>> overlays;
    std::size_t unselected_checked = 0;
    std::size_t unselected_nonzero = 0;
};

inline BlockResult audit_block(std::span<const ObservationRef> obs, std::size_t begin, std::size_t end,
                               const VQCodecModel& model, const AuditConfig& cfg)
{
    const std::size_t k = model.codebook_size();
    BlockResult r(k);
    std::vector<std::uint8_t> selected(k);
    for (std::size_t i = begin; i < end; ++i) {
        const ObservationRef& ref = obs[i];
        const tileworld::Observation& o = *ref.obs;
        const GradCamSession session(model, o.frame, cfg.saliency);
        r.freq.add(session.quantized().assignments);
        const std::vector<int> codes = session.selected_codes();
        r.code_sets.push_back(codes);
        r.episodes.push_back(ref.episode);

        std::vector<Heatmap> maps;
        for (int c : codes) {
            maps.push_back(session.heatmap(c, ref.episode, ref.step));
            ++r.heatmaps[static_cast<std::size_t>(c)];
        }
        ZeroFilterResult filtered = filter_zero(std::move(maps), cfg.saliency.epsilon);
        std::fill(selected.begin(), selected.end(), 0);
        for (int c : codes) {
            selected[static_cast<std::size_t>(c)] = 1;
            ++r.dropped[static_cast<std::size_t>(c)];
        }
        for (const Heatmap& h : filtered.kept) {
            const auto c = static_cast<std::size_t>(h.code);
            --r.dropped[c];
            ++r.kept[c];
            if (r.overlays[c].size() < cfg.overlays_per_code) {
                r.overlays[c].push_back({i, h});
            }
            const auto comps = filter_by_area(
                connected_components(threshold_mask(h, cfg.act_threshold), cfg.connectivity), cfg.area_threshold);
            for (const auto& comp : comps) {
                CropRecord rec = crop(o.frame, o.mask, comp);
                const Descriptor d = embed(cfg.embedder, rec.image, &model);
                r.acc[c].add(d.values);
                const int label = modal_label(rec.mask);
                r.labels[c].push_back(label);
                r.crops.push_back({h.code, ref.episode, ref.step, comp.bbox, comp.area(), label, d.flat});
                r.sizes.push_back({rec.image.height, rec.image.width});
                if (r.points[c].size() < cfg.tsne_max_points_per_code) {
                    r.points[c].push_back({h.code, ref.episode, ref.step, d.values});
                }
                if (r.gallery[c].size() < cfg.gallery_size) {
                    r.gallery[c].push_back(std::move(rec.image));
                }
            }
        }
        if (cfg.check_unselected) {
            for (std::size_t c = 0; c < k; ++c) {
                if (selected[c]) {
                    continue;
                }
                ++r.unselected_checked;
                if (session.heatmap(static_cast<int>(c)).raw_max > cfg.saliency.epsilon) {
                    ++r.unselected_nonzero;
                }
            }
        }
    }
    return r;
}

template <typename T>
void append_capped(std::vector<T>& dst, std::vector<T>& src, std::size_t cap)
{
    for (auto& v : src) {
        if (dst.size() >= cap) {
            break;
        }
        dst.push_back(std::move(v));
    }
}

inline double median_of(std::vector<double> v)
{
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline void validate(const AuditConfig& cfg)
{
    if (!(cfg.act_threshold >= 0.0 && cfg.act_threshold <= 1.0)) {
        throw ConfigError("activation threshold must lie in [0, 1]");
    }
    if (cfg.area_threshold == 0) {
        throw ConfigError("area threshold must be at least 1 pixel");
    }
    if (cfg.connectivity != 4 && cfg.connectivity != 8) {
        throw ConfigError("connectivity must be 4 or 8");
    }
    if (cfg.baseline_trials == 0) {
        throw ConfigError("baseline needs at least one trial");
    }
    if (!(cfg.perplexity >= 1.0)) {
        throw ConfigError("perplexity must be at least 1");
    }
    if (cfg.tsne_max_points_per_code == 0) {
        throw ConfigError("t-SNE needs at least one point per projected code");
    }
}

} // namespace detail

/// Flattens episodes into (episode, step) order.
inline std::vector<ObservationRef> observation_refs(std::span<const tileworld::EpisodeLog> episodes)
{
    std::vector<ObservationRef> out;
    for (std::size_t e = 0; e < episodes.size(); ++e) {
        for (std::size_t t = 0; t < episodes[e].observations.size(); ++t) {
            out.push_back({e, t, &episodes[e].observations[t]});
        }
    }
    return out;
}

/// Full audit: quantize every observation, Grad-CAM each selected code, crop and embed the high
/// activation regions, then score codes and project the most consistent ones.
inline AuditBundle run_audit(std::span<const tileworld::EpisodeLog> episodes, const VQCodecModel& model,
                             const AuditConfig& cfg)
{
    detail::validate(cfg);
    const std::vector<ObservationRef> obs = observation_refs(episodes);
    if (obs.empty()) {
        throw ConfigError("cannot audit an empty dataset");
    }
    const Shape& input = model.architecture.input;
    for (const auto& ref : obs) {
        const auto& f = ref.obs->frame;
        if (f.height != input[1] || f.width != input[2]) {
            throw ConfigError("observation is " + std::to_string(f.height) + "x" + std::to_string(f.width)
                              + " but the model expects " + std::to_string(input[1]) + "x"
                              + std::to_string(input[2]));
        }
        if (ref.obs->mask.height != f.height || ref.obs->mask.width != f.width) {
            throw ConfigError("observation mask does not match its frame");
        }
    }

    const std::size_t k = model.codebook_size();
    const std::size_t blocks = (obs.size() + kAuditBlock - 1) / kAuditBlock;
    std::vector<std::optional<detail::BlockResult>> results(blocks);
    {
        std::atomic<std::size_t> next{0};
        std::exception_ptr failure;
        std::mutex failure_mutex;
        const auto work = [&] {
            for (;;) {
                const std::size_t b = next.fetch_add(1);
                if (b >= blocks) {
                    return;
                }
                try {
                    results[b].emplace(detail::audit_block(obs, b * kAuditBlock,
                                                           std::min(obs.size(), (b + 1) * kAuditBlock), model, cfg));
                } catch (...) {
                    const std::lock_guard lock(failure_mutex);
                    if (!failure) {
                        failure = std::current_exception();
                    }
                    next = blocks;
                }
            }
        };
        const std::size_t n_workers = std::clamp<std::size_t>(cfg.workers, 1, blocks);
        std::vector<std::thread> pool;
        for (std::size_t w = 1; w < n_workers; ++w) {
            pool.emplace_back(work);
        }
        work();
        for (auto& t : pool) {
            t.join();
        }
        if (failure) {
            std::rethrow_exception(failure);
        }
    }

    AuditBundle out;
    out.config = cfg;
    out.codebook_size = k;
    out.image_h = input[1];
    out.image_w = input[2];
    out.observations = obs.size();
    const auto model_bytes = serialize_checkpoint(model);
    out.model_checksum = crc32_hex(crc32_of(model_bytes));
    const Shape latent = model.latent_shape();
    out.grid_h = latent[1];
    out.grid_w = latent[2];

    FrequencyCounter freq(k);
    std::vector<std::vector<int>> code_sets;
    std::vector<std::size_t> episode_ids;
    std::vector<ConsistencyAccumulator> acc(k);
    std::vector<std::vector<int>> labels(k);
    std::vector<CropSize> sizes;
    std::vector<std::vector<TsnePoint>> points(k);
    out.galleries.resize(k);
    out.overlays.resize(k);
    out.codes.resize(k);
    for (auto& slot : results) {
        auto& r = *slot;
        freq.merge(r.freq);
        for (auto& s : r.code_sets) {
            code_sets.push_back(std::move(s));
        }
        episode_ids.insert(episode_ids.end(), r.episodes.begin(), r.episodes.end());
        for (std::size_t c = 0; c < k; ++c) {
            acc[c].merge(r.acc[c]);
            labels[c].insert(labels[c].end(), r.labels[c].begin(), r.labels[c].end());
            out.codes[c].heatmaps += r.heatmaps[c];
            out.codes[c].kept += r.kept[c];
            out.codes[c].dropped += r.dropped[c];
            detail::append_capped(points[c], r.points[c], cfg.tsne_max_points_per_code);
            detail::append_capped(out.galleries[c], r.gallery[c], cfg.gallery_size);
            detail::append_capped(out.overlays[c], r.overlays[c], cfg.overlays_per_code);
        }
        out.crops.insert(out.crops.end(), r.crops.begin(), r.crops.end());
        sizes.insert(sizes.end(), r.sizes.begin(), r.sizes.end());
        out.unselected_checked += r.unselected_checked;
        out.unselected_nonzero += r.unselected_nonzero;
        slot.reset();
    }
    std::stable_sort(out.crops.begin(), out.crops.end(),
                     [](const CropRef& a, const CropRef& b) { return a.code < b.code; });

    out.usage = freq.result();
    out.cooccurrence = cooccurrence(code_sets, k, episode_ids);
    for (std::size_t c = 0; c < k; ++c) {
        CodeAudit& ca = out.codes[c];
        ca.code = static_cast<int>(c);
        ca.selections = out.usage.counts[c];
        ca.observations = out.usage.observation_counts[c];
        ca.crops = labels[c].size();
        if (acc[c].count() > 0) {
            ca.consistency = acc[c].result();
        }
        ca.purity = purity_of(labels[c]);
        out.pairs += ca.heatmaps;
        out.kept += ca.kept;
        out.dropped += ca.dropped;
    }
    out.zero_fraction = out.pairs == 0 ? 0.0 : static_cast<double>(out.dropped) / static_cast<double>(out.pairs);

    // Median and best consistency over codes with at least two descriptors; a single crop scores 1 by
    // construction and would otherwise dominate the best code.
    std::vector<double> ranked;
    for (const auto& ca : out.codes) {
        if (ca.consistency && !ca.consistency->low_support) {
            ranked.push_back(ca.consistency->score);
            if (!out.best_consistency || ca.consistency->score > *out.best_consistency) {
                out.best_consistency = ca.consistency->score;
                out.best_code = ca.code;
            }
        }
    }
    out.ranked_codes = ranked.size();
    if (!ranked.empty()) {
        out.median_consistency = detail::median_of(ranked);
    }

    std::vector<double> crop_counts;
    for (const auto& ca : out.codes) {
        if (ca.crops > 0) {
            crop_counts.push_back(static_cast<double>(ca.crops));
        }
    }
    if (!crop_counts.empty()) {
        const auto samples = static_cast<std::size_t>(std::max(1.0, std::round(detail::median_of(crop_counts))));
        const auto frame_at = [&](std::size_t i) -> const RgbImage& { return obs[i].obs->frame; };
        const CropEmbedder embed_fn = [&](const RgbImage& img) { return embed(cfg.embedder, img, &model); };
        out.baseline = random_baseline(obs.size(), frame_at, sizes, samples, cfg.baseline_trials,
                                       derive_seed(cfg.seed, 101), embed_fn);
    }

    std::vector<CodeScore> scores;
    for (const auto& ca : out.codes) {
        scores.push_back({ca.code, ca.consistency ? ca.consistency->count : 0,
                          ca.consistency ? std::optional<double>(ca.consistency->score) : std::nullopt});
    }
    out.projected_codes = select_for_projection(scores, cfg.tsne_top_k, cfg.tsne_min_count);
    for (int c : out.projected_codes) {
        for (auto& p : points[static_cast<std::size_t>(c)]) {
            out.tsne_points.push_back(std::move(p));
        }
    }
    const std::size_t n = out.tsne_points.size();
    if (out.projected_codes.empty()) {
        out.tsne_note = "no code reached the minimum count";
    } else if (n < 5) {
        out.tsne_note = "fewer than 5 points";
        out.tsne_points.clear();
    } else {
        TsneConfig tc;
        tc.seed = derive_seed(cfg.seed, 202);
        tc.iterations = cfg.tsne_iterations;
        tc.perplexity = cfg.perplexity;
        if (!(tc.perplexity < static_cast<double>(n) / 3.0)) {
            tc.perplexity = std::max(1.0, static_cast<double>(n - 1) / 3.0);
            out.tsne_note = "perplexity lowered to fit the point count";
        }
        out.tsne_perplexity = tc.perplexity;
        std::vector<std::vector<double>> x;
        std::vector<int> point_labels;
        for (const auto& p : out.tsne_points) {
            x.push_back(p.descriptor);
            point_labels.push_back(p.code);
        }
        out.layout = tsne(x, point_labels, tc);
    }

    std::vector<std::size_t> needed;
    for (const auto& per_code : out.overlays) {
        for (const auto& s : per_code) {
            needed.push_back(s.observation);
        }
    }
    std::sort(needed.begin(), needed.end());
    needed.erase(std::unique(needed.begin(), needed.end()), needed.end());
    for (std::size_t i : needed) {
        out.overlay_frame_index.push_back(i);
        out.overlay_frames.push_back(obs[i].obs->frame);
    }
    return out;
}

inline AuditBundle run_audit(const tileworld::Dataset& dataset, const VQCodecModel& model, const AuditConfig& cfg)
{
    AuditBundle b = run_audit(std::span<const tileworld::EpisodeLog>(dataset.episodes), model, cfg);
    b.dataset_checksum = dataset.checksum;
    return b;
}

/// Frame of the observation an overlay refers to.
inline const RgbImage& overlay_frame(const AuditBundle& b, std::size_t observation)
{
    const auto it = std::lower_bound(b.overlay_frame_index.begin(), b.overlay_frame_index.end(), observation);
    if (it == b.overlay_frame_index.end() || *it != observation) {
        throw UsageError("overlay frame was not retained");
    }
    return b.overlay_frames[static_cast<std::size_t>(it - b.overlay_frame_index.begin())];
}

} // namespace vqa

#endif
