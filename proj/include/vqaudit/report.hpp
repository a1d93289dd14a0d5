#ifndef VQAUDIT_REPORT_HPP
#define VQAUDIT_REPORT_HPP

#include "audit.hpp"
#include "errors.hpp"
#include "image.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace vqa {

inline constexpr const char* kToolName = "vqaudit";
inline constexpr const char* kToolVersion = "0.1.0";

// --- overlays ------------------------------------------------------------------------------------

/// Entry i of a 256-step jet colormap: dark blue through cyan, yellow and red.
inline Rgb colormap(std::uint8_t i)
{
    const double t = i / 255.0;
    const auto channel = [](double x) {
        const double v = std::clamp(1.5 - std::abs(4.0 * x), 0.0, 1.0);
        return static_cast<std::uint8_t>(std::lround(255.0 * v));
    };
    return {channel(t - 0.75), channel(t - 0.5), channel(t - 0.25)};
}

inline std::uint8_t colormap_index(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

/// out = round((1 - alpha) * frame + alpha * colormap(heatmap)) per channel.
inline RgbImage overlay(const RgbImage& frame, const Heatmap& heatmap, double alpha = 0.5)
{
    if (heatmap.height != frame.height || heatmap.width != frame.width) {
        throw ConfigError("heatmap and frame sizes differ");
    }
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw ConfigError("overlay alpha must lie in [0, 1]");
    }
    RgbImage out(frame.width, frame.height);
    for (std::size_t y = 0; y < frame.height; ++y) {
        for (std::size_t x = 0; x < frame.width; ++x) {
            const Rgb c = colormap(colormap_index(heatmap.values[y * frame.width + x]));
            for (std::size_t k = 0; k < 3; ++k) {
                const double v = (1.0 - alpha) * frame.at(y, x, k) + alpha * c[k];
                out.at(y, x, k) = static_cast<std::uint8_t>(std::lround(v));
            }
        }
    }
    return out;
}

// --- CSV -----------------------------------------------------------------------------------------

/// Shortest form that still round-trips through strtod.
inline std::string fmt_double(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

using CsvTable = std::vector<std::vector<std::string>>;

/// Plain comma-separated parsing; the tool never writes quoted fields.
inline CsvTable read_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw LoadError("cannot read " + path.string());
    }
    CsvTable rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) {
            cells.push_back(cell);
        }
        if (!line.empty() && line.back() == ',') {
            cells.emplace_back();
        }
        rows.push_back(std::move(cells));
    }
    return rows;
}

struct ParsedCooccurrence {
    std::size_t size = 0;
    std::vector<double> rates;
};

inline ParsedCooccurrence read_cooccurrence_csv(const std::filesystem::path& path)
{
    const CsvTable t = read_csv(path);
    if (t.empty()) {
        throw LoadError("cooccurrence.csv has no header");
    }
    ParsedCooccurrence m;
    m.size = t[0].size() - 1;
    if (t.size() != m.size + 1) {
        throw LoadError("cooccurrence.csv is not square");
    }
    for (std::size_t i = 0; i < m.size; ++i) {
        if (t[0][i + 1] != std::to_string(i) || t[i + 1].size() != m.size + 1 || t[i + 1][0] != std::to_string(i)) {
            throw LoadError("cooccurrence.csv row or column " + std::to_string(i) + " is mislabelled");
        }
        for (std::size_t j = 0; j < m.size; ++j) {
            m.rates.push_back(std::stod(t[i + 1][j + 1]));
        }
    }
    return m;
}

// --- raster plots --------------------------------------------------------------------------------

namespace plot {

struct Canvas {
    RgbImage img;

    Canvas(std::size_t w, std::size_t h)
        : img(w, h, 255)
    {
    }

    void fill(long x0, long y0, long x1, long y1, Rgb c)
    {
        x0 = std::max(0L, x0);
        y0 = std::max(0L, y0);
        x1 = std::min(static_cast<long>(img.width) - 1, x1);
        y1 = std::min(static_cast<long>(img.height) - 1, y1);
        for (long y = y0; y <= y1; ++y) {
            for (long x = x0; x <= x1; ++x) {
                for (std::size_t k = 0; k < 3; ++k) {
                    img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), k) = c[k];
                }
            }
        }
    }
};

inline constexpr std::array<Rgb, 10> kCategorical = {{{31, 119, 180},
                                                     {255, 127, 14},
                                                     {44, 160, 44},
                                                     {214, 39, 40},
                                                     {148, 103, 189},
                                                     {140, 86, 75},
                                                     {227, 119, 194},
                                                     {127, 127, 127},
                                                     {188, 189, 34},
                                                     {23, 190, 207}}};

inline constexpr Rgb kAxis{0, 0, 0};
inline constexpr Rgb kBar{70, 110, 170};
inline constexpr Rgb kBaseline{210, 40, 40};
inline constexpr long kMargin = 20;

/// Bars for `values` over [lo, hi], with an optional horizontal reference line.
inline RgbImage bars(const std::vector<double>& values, double lo, double hi, std::optional<double> line = {})
{
    const long bar_w = std::clamp(480L / std::max<long>(1, static_cast<long>(values.size())), 2L, 24L);
    const long plot_w = bar_w * static_cast<long>(values.size());
    const long plot_h = 200;
    Canvas cv(static_cast<std::size_t>(plot_w + 2 * kMargin), static_cast<std::size_t>(plot_h + 2 * kMargin));
    const auto ypix = [&](double v) {
        const double t = hi > lo ? (std::clamp(v, lo, hi) - lo) / (hi - lo) : 0.0;
        return kMargin + plot_h - static_cast<long>(std::lround(t * plot_h));
    };
    const long zero = ypix(std::clamp(0.0, lo, hi));
    for (std::size_t i = 0; i < values.size(); ++i) {
        const long x0 = kMargin + static_cast<long>(i) * bar_w;
        const long y = ypix(values[i]);
        cv.fill(x0, std::min(y, zero), x0 + std::max(0L, bar_w - 2), std::max(y, zero), kBar);
    }
    cv.fill(kMargin - 1, kMargin, kMargin - 1, kMargin + plot_h, kAxis);
    cv.fill(kMargin - 1, zero, kMargin + plot_w, zero, kAxis);
    if (line) {
        const long y = ypix(*line);
        cv.fill(kMargin, y, kMargin + plot_w, y, kBaseline);
    }
    return cv.img;
}

inline RgbImage scatter(const std::vector<double>& xs, const std::vector<double>& ys, const std::vector<int>& groups)
{
    const long side = 400;
    Canvas cv(static_cast<std::size_t>(side + 2 * kMargin), static_cast<std::size_t>(side + 2 * kMargin));
    const auto [xmin, xmax] = std::minmax_element(xs.begin(), xs.end());
    const auto [ymin, ymax] = std::minmax_element(ys.begin(), ys.end());
    const double span = std::max({*xmax - *xmin, *ymax - *ymin, 1e-12});
    std::map<int, std::size_t> color_of;
    for (int g : groups) {
        color_of.emplace(g, color_of.size());
    }
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const long px = kMargin + static_cast<long>(std::lround((xs[i] - *xmin) / span * side));
        const long py = kMargin + side - static_cast<long>(std::lround((ys[i] - *ymin) / span * side));
        cv.fill(px - 2, py - 2, px + 2, py + 2, kCategorical[color_of[groups[i]] % kCategorical.size()]);
    }
    return cv.img;
}

/// Square matrix as colormapped cells, values scaled by the largest entry.
inline RgbImage matrix(std::size_t n, const std::vector<double>& v)
{
    const long cell = std::clamp(512L / static_cast<long>(n), 1L, 16L);
    Canvas cv(static_cast<std::size_t>(cell * static_cast<long>(n)), static_cast<std::size_t>(cell * static_cast<long>(n)));
    const double top = *std::max_element(v.begin(), v.end());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double t = top > 0.0 ? v[i * n + j] / top : 0.0;
            const long x = static_cast<long>(j) * cell, y = static_cast<long>(i) * cell;
            cv.fill(x, y, x + cell - 1, y + cell - 1, colormap(colormap_index(t)));
        }
    }
    return cv.img;
}

/// Crops scaled to a common tile size and laid out in a row.
inline RgbImage gallery(const std::vector<RgbImage>& crops, std::size_t tile = 32, std::size_t gap = 2)
{
    Canvas cv(crops.size() * (tile + gap) + gap, tile + 2 * gap);
    for (std::size_t i = 0; i < crops.size(); ++i) {
        const RgbImage& c = crops[i];
        for (std::size_t y = 0; y < tile; ++y) {
            const std::size_t sy = std::min(c.height - 1, y * c.height / tile);
            for (std::size_t x = 0; x < tile; ++x) {
                const std::size_t sx = std::min(c.width - 1, x * c.width / tile);
                for (std::size_t k = 0; k < 3; ++k) {
                    cv.img.at(gap + y, gap + i * (tile + gap) + x, k) = c.at(sy, sx, k);
                }
            }
        }
    }
    return cv.img;
}

} // namespace plot

// --- emission ------------------------------------------------------------------------------------

struct OutputEntry {
    std::string path; // relative to the output directory
    std::uintmax_t bytes = 0;
    std::string crc32;
};

struct RunInfo {
    std::string command;
    nlohmann::json config; // full resolved configuration, echoed verbatim into the manifest
    std::string started_at;
};

inline std::string utc_timestamp()
{
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Creates `dir` and proves a file can be written there, before anything else is produced.
inline void ensure_writable(const std::filesystem::path& dir)
{
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
        throw IoError("cannot create output directory " + dir.string());
    }
    const fs::path probe = dir / ".vqaudit_write_probe";
    {
        std::ofstream f(probe, std::ios::binary);
        if (!(f << "probe") || !f.flush()) {
            throw IoError("output directory is not writable: " + dir.string());
        }
    }
    fs::remove(probe, ec);
}

class OutputWriter {
public:
    explicit OutputWriter(std::filesystem::path root)
        : root_(std::move(root))
    {
    }

    void bytes(const std::string& rel, std::span<const std::uint8_t> data)
    {
        try {
            write_file_bytes(root_ / rel, data);
        } catch (const std::exception& e) {
            throw IoError("writing " + rel + ": " + e.what());
        }
        entries_.push_back({rel, data.size(), crc32_hex(crc32_of(data))});
    }

    void text(const std::string& rel, const std::string& s)
    {
        bytes(rel, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
    }

    void png(const std::string& rel, const RgbImage& img) { bytes(rel, encode_rgb_png(img)); }

    const std::vector<OutputEntry>& entries() const { return entries_; }
    const std::filesystem::path& root() const { return root_; }

private:
    std::filesystem::path root_;
    std::vector<OutputEntry> entries_;
};

inline std::string optional_cell(const std::optional<double>& v) { return v ? fmt_double(*v) : std::string(); }

inline std::string codes_csv(const AuditBundle& b)
{
    std::string s = "code,n_selections,share,n_crops,consistency,baseline_delta,purity,dominant_label,entropy_bits,"
                    "observation_share,n_heatmaps,n_kept,n_dropped,low_support\n";
    for (const auto& c : b.codes) {
        const auto k = static_cast<std::size_t>(c.code);
        std::optional<double> score, delta, purity, entropy;
        if (c.consistency) {
            score = c.consistency->score;
            if (b.baseline) {
                delta = *score - b.baseline->mean;
            }
        }
        if (c.crops > 0) {
            purity = c.purity.purity;
            entropy = c.purity.entropy_bits;
        }
        s += std::to_string(c.code) + "," + std::to_string(c.selections) + "," + fmt_double(b.usage.shares[k]) + ","
             + std::to_string(c.crops) + "," + optional_cell(score) + "," + optional_cell(delta) + ","
             + optional_cell(purity) + "," + (c.crops > 0 ? std::to_string(c.purity.dominant_label) : "") + ","
             + optional_cell(entropy) + "," + fmt_double(b.usage.observation_shares[k]) + ","
             + std::to_string(c.heatmaps) + "," + std::to_string(c.kept) + "," + std::to_string(c.dropped) + ","
             + (c.consistency ? (c.consistency->low_support ? "1" : "0") : "") + "\n";
    }
    return s;
}

inline std::string frequency_csv(const AuditBundle& b)
{
    std::string s = "code,count,share,observations,observation_share\n";
    for (std::size_t k = 0; k < b.codebook_size; ++k) {
        s += std::to_string(k) + "," + std::to_string(b.usage.counts[k]) + "," + fmt_double(b.usage.shares[k]) + ","
             + std::to_string(b.usage.observation_counts[k]) + "," + fmt_double(b.usage.observation_shares[k]) + "\n";
    }
    return s;
}

inline std::string cooccurrence_csv(const CooccurrenceMatrix& m)
{
    std::string s = "code";
    for (std::size_t j = 0; j < m.size; ++j) {
        s += "," + std::to_string(j);
    }
    s += "\n";
    for (std::size_t i = 0; i < m.size; ++i) {
        s += std::to_string(i);
        for (std::size_t j = 0; j < m.size; ++j) {
            s += "," + fmt_double(m.rate(i, j));
        }
        s += "\n";
    }
    return s;
}

inline std::string top_pairs_csv(const CooccurrenceMatrix& m)
{
    std::string s = "rank,code_a,code_b,rate,together,episodes\n";
    std::size_t rank = 1;
    for (const auto& p : top_pairs(m, 10)) {
        if (p.together == 0) {
            break;
        }
        s += std::to_string(rank++) + "," + std::to_string(p.i) + "," + std::to_string(p.j) + "," + fmt_double(p.rate)
             + "," + std::to_string(p.together) + "," + std::to_string(p.episodes) + "\n";
    }
    return s;
}

inline std::string tsne_csv(const AuditBundle& b)
{
    std::string s = "code,episode,step,x,y\n";
    if (!b.layout) {
        return s;
    }
    for (std::size_t i = 0; i < b.layout->n; ++i) {
        const auto& p = b.tsne_points[i];
        s += std::to_string(p.code) + "," + std::to_string(p.episode) + "," + std::to_string(p.step) + ","
             + fmt_double(b.layout->x(i)) + "," + fmt_double(b.layout->y(i)) + "\n";
    }
    return s;
}

inline std::string crops_csv(const AuditBundle& b)
{
    std::string s = "code,episode,step,row_min,col_min,row_max,col_max,area,label,flat\n";
    for (const auto& c : b.crops) {
        s += std::to_string(c.code) + "," + std::to_string(c.episode) + "," + std::to_string(c.step) + ","
             + std::to_string(c.bbox.row_min) + "," + std::to_string(c.bbox.col_min) + ","
             + std::to_string(c.bbox.row_max) + "," + std::to_string(c.bbox.col_max) + "," + std::to_string(c.area)
             + "," + std::to_string(c.label) + "," + (c.flat ? "1" : "0") + "\n";
    }
    return s;
}

inline std::string baseline_csv(const AuditBundle& b)
{
    std::string s = "trial,score\n";
    if (b.baseline) {
        for (std::size_t t = 0; t < b.baseline->trial_scores.size(); ++t) {
            s += std::to_string(t) + "," + fmt_double(b.baseline->trial_scores[t]) + "\n";
        }
    }
    return s;
}

/// Configuration that determines the results. The worker count is left out on purpose: it only
/// changes speed, and summary.json must not differ between worker counts.
inline nlohmann::json result_config(const AuditConfig& c)
{
    return {{"act_threshold", c.act_threshold},
            {"area_threshold", c.area_threshold},
            {"connectivity", c.connectivity},
            {"embedder", embedder_name(c.embedder)},
            {"baseline_trials", c.baseline_trials},
            {"tsne_top_k", c.tsne_top_k},
            {"tsne_min_count", c.tsne_min_count},
            {"tsne_max_points_per_code", c.tsne_max_points_per_code},
            {"perplexity", c.perplexity},
            {"tsne_iterations", c.tsne_iterations},
            {"seed", c.seed},
            {"zero_epsilon", c.saliency.epsilon},
            {"target_layer", c.saliency.target_layer ? nlohmann::json(*c.saliency.target_layer) : nlohmann::json()},
            {"target", c.saliency.target == TargetKind::negative_distance ? "negative_distance" : "inner_product"},
            {"upsample", c.saliency.upsample == Upsample::bilinear ? "bilinear" : "nearest"}};
}

inline nlohmann::json full_config(const AuditConfig& c)
{
    nlohmann::json j = result_config(c);
    j["workers"] = c.workers;
    j["gallery_size"] = c.gallery_size;
    j["overlays_per_code"] = c.overlays_per_code;
    j["check_unselected"] = c.check_unselected;
    return j;
}

inline nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

inline nlohmann::json summary_json(const AuditBundle& b)
{
    nlohmann::json j;
    j["observations"] = b.observations;
    j["codebook_size"] = b.codebook_size;
    j["latent_grid"] = {b.grid_h, b.grid_w};
    j["image_size"] = {b.image_h, b.image_w};
    j["active_codes"] = b.usage.active_codes();
    j["heatmaps_total"] = b.pairs;
    j["heatmaps_kept"] = b.kept;
    j["heatmaps_dropped"] = b.dropped;
    j["zero_heatmap_fraction"] = b.zero_fraction;
    j["crops"] = b.crops.size();
    if (b.config.check_unselected) {
        j["unselected_checked"] = b.unselected_checked;
        j["unselected_nonzero"] = b.unselected_nonzero;
    }
    j["ranked_codes"] = b.ranked_codes;
    j["median_consistency"] = optional_json(b.median_consistency);
    j["best_consistency"] = optional_json(b.best_consistency);
    j["best_code"] = b.best_code >= 0 ? nlohmann::json(b.best_code) : nlohmann::json();
    j["baseline_consistency"] = b.baseline ? nlohmann::json(b.baseline->mean) : nlohmann::json();
    j["baseline_samples_per_trial"] = b.baseline ? b.baseline->samples_per_trial : 0;
    j["median_gap"] = optional_json(b.median_gap());
    j["best_gap"] = optional_json(b.best_gap());
    if (b.median_gap() && b.best_gap()) {
        j["median_gap_below_best_gap"] = *b.median_gap() < *b.best_gap();
    }
    j["projected_codes"] = b.projected_codes;
    j["tsne_points"] = b.layout ? b.layout->n : 0;
    j["tsne_kl"] = b.layout ? nlohmann::json(b.layout->kl) : nlohmann::json();
    j["tsne_perplexity"] = b.layout ? nlohmann::json(b.tsne_perplexity) : nlohmann::json();
    if (!b.tsne_note.empty()) {
        j["tsne_note"] = b.tsne_note;
    }
    j["dataset_checksum"] = b.dataset_checksum;
    j["model_checksum"] = b.model_checksum;
    j["config"] = result_config(b.config);
    return j;
}

inline std::string code_tag(std::size_t code)
{
    char buf[16];
    std::snprintf(buf, sizeof buf, "code_%03zu", code);
    return buf;
}

/// Renders plots/ from the CSVs and summary.json already in `dir`. Sections without data get no file.
inline void render_plots(const std::filesystem::path& dir, OutputWriter& w)
{
    namespace fs = std::filesystem;
    fs::create_directories(w.root() / "plots");

    const CsvTable codes = read_csv(dir / "codes.csv");
    std::optional<double> baseline;
    {
        std::ifstream in(dir / "summary.json");
        if (!in) {
            throw LoadError("bundle has no summary.json");
        }
        const auto summary = nlohmann::json::parse(in);
        if (summary.contains("baseline_consistency") && !summary["baseline_consistency"].is_null()) {
            baseline = summary["baseline_consistency"].get<double>();
        }
    }
    std::vector<double> scores;
    for (std::size_t r = 1; r < codes.size(); ++r) {
        if (codes[r].size() > 4 && !codes[r][4].empty()) {
            scores.push_back(std::stod(codes[r][4]));
        }
    }
    if (!scores.empty()) {
        std::sort(scores.begin(), scores.end(), std::greater<>());
        const double lo = std::min({0.0, scores.back(), baseline.value_or(0.0)});
        w.png("plots/consistency.png", plot::bars(scores, lo, 1.0, baseline));
    }

    const CsvTable freq = read_csv(dir / "frequency.csv");
    std::vector<double> shares;
    for (std::size_t r = 1; r < freq.size(); ++r) {
        const double s = std::stod(freq[r][2]);
        if (s > 0.0) {
            shares.push_back(s);
        }
    }
    if (!shares.empty()) {
        std::sort(shares.begin(), shares.end(), std::greater<>());
        w.png("plots/frequency.png", plot::bars(shares, 0.0, shares.front()));
    }

    const ParsedCooccurrence co = read_cooccurrence_csv(dir / "cooccurrence.csv");
    if (co.size > 0 && std::any_of(co.rates.begin(), co.rates.end(), [](double v) { return v > 0.0; })) {
        w.png("plots/cooccurrence.png", plot::matrix(co.size, co.rates));
    }

    const CsvTable ts = read_csv(dir / "tsne.csv");
    if (ts.size() > 1) {
        std::vector<double> xs, ys;
        std::vector<int> groups;
        for (std::size_t r = 1; r < ts.size(); ++r) {
            groups.push_back(std::stoi(ts[r][0]));
            xs.push_back(std::stod(ts[r][3]));
            ys.push_back(std::stod(ts[r][4]));
        }
        w.png("plots/tsne.png", plot::scatter(xs, ys, groups));
    }
}

inline nlohmann::json manifest_json(const RunInfo& info, const std::string& dataset_checksum,
                                    const std::string& model_checksum, std::uint64_t seed,
                                    std::vector<OutputEntry> outputs)
{
    std::sort(outputs.begin(), outputs.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
    nlohmann::json j;
    j["tool"] = kToolName;
    j["version"] = kToolVersion;
    j["command"] = info.command;
    j["config"] = info.config;
    j["dataset_checksum"] = dataset_checksum;
    j["model_checksum"] = model_checksum;
    j["seed"] = seed;
    j["started_at"] = info.started_at;
    j["finished_at"] = utc_timestamp();
    j["outputs"] = nlohmann::json::array();
    for (const auto& o : outputs) {
        j["outputs"].push_back({{"path", o.path}, {"bytes", o.bytes}, {"crc32", o.crc32}});
    }
    return j;
}

/// Writes the whole bundle plus run_manifest.json, which indexes every other file written.
inline nlohmann::json emit_reports(const AuditBundle& b, const std::filesystem::path& out_dir, RunInfo info = {})
{
    namespace fs = std::filesystem;
    ensure_writable(out_dir);
    if (info.started_at.empty()) {
        info.started_at = utc_timestamp();
    }
    if (info.config.is_null()) {
        info.config = full_config(b.config);
    }
    OutputWriter w(out_dir);
    w.text("codes.csv", codes_csv(b));
    w.text("frequency.csv", frequency_csv(b));
    w.text("cooccurrence.csv", cooccurrence_csv(b.cooccurrence));
    w.text("top_pairs.csv", top_pairs_csv(b.cooccurrence));
    w.text("tsne.csv", tsne_csv(b));
    w.text("crops.csv", crops_csv(b));
    w.text("baseline.csv", baseline_csv(b));
    w.text("summary.json", summary_json(b).dump(2) + "\n");

    fs::create_directories(out_dir / "overlays");
    fs::create_directories(out_dir / "galleries");
    for (std::size_t c = 0; c < b.codebook_size; ++c) {
        for (const auto& s : b.overlays[c]) {
            const auto& h = s.heatmap;
            w.png("overlays/" + code_tag(c) + "_ep" + std::to_string(h.episode) + "_t" + std::to_string(h.step) + ".png",
                  overlay(overlay_frame(b, s.observation), h));
        }
        if (!b.galleries[c].empty()) {
            w.png("galleries/" + code_tag(c) + ".png", plot::gallery(b.galleries[c]));
        }
    }
    render_plots(out_dir, w);

    const nlohmann::json manifest = manifest_json(info, b.dataset_checksum, b.model_checksum, b.config.seed, w.entries());
    const std::string text = manifest.dump(2) + "\n";
    write_file_bytes(out_dir / "run_manifest.json",
                     std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    return manifest;
}

/// Re-renders plots/ for an existing bundle directory into `out_dir` and writes report_manifest.json.
inline nlohmann::json render_report(const std::filesystem::path& bundle_dir, const std::filesystem::path& out_dir,
                                    RunInfo info = {})
{
    for (const char* required : {"codes.csv", "frequency.csv", "cooccurrence.csv", "tsne.csv", "summary.json"}) {
        if (!std::filesystem::exists(bundle_dir / required)) {
            throw LoadError("bundle is missing " + std::string(required));
        }
    }
    ensure_writable(out_dir);
    if (info.started_at.empty()) {
        info.started_at = utc_timestamp();
    }
    OutputWriter w(out_dir);
    render_plots(bundle_dir, w);
    std::ifstream in(bundle_dir / "summary.json");
    const auto summary = nlohmann::json::parse(in);
    const nlohmann::json manifest =
        manifest_json(info, summary.value("dataset_checksum", ""), summary.value("model_checksum", ""),
                      summary["config"].value("seed", std::uint64_t{0}), w.entries());
    const std::string text = manifest.dump(2) + "\n";
    write_file_bytes(out_dir / "report_manifest.json",
                     std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    return manifest;
}

} // namespace vqa

#endif
