#ifndef VQAUDIT_CODESTATS_HPP
#define VQAUDIT_CODESTATS_HPP

#include "embedder.hpp"
#include "errors.hpp"
#include "image.hpp"
#include "regions.hpp"
#include "rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace vqa {

// --- consistency ---------------------------------------------------------------------------------

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b)
{
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

} // namespace detail

struct ConsistencyResult {
    std::size_t count = 0;      // descriptors used (zero vectors excluded)
    std::vector<double> mean;   // arithmetic mean of those descriptors
    double score = 0.0;         // mean cosine between `mean` and each descriptor
    bool low_support = false;   // count == 1
};

/// Streaming form of the consistency score. Since cos(mu, e) = mu . (e / |e|) / |mu|, the running
/// sum of descriptors and the running sum of their unit directions are enough.
class ConsistencyAccumulator {
public:
    void add(std::span<const double> e)
    {
        const double n = detail::norm(e);
        if (n == 0.0) {
            return;
        }
        if (sum_.empty()) {
            sum_.assign(e.size(), 0.0);
            sum_unit_.assign(e.size(), 0.0);
        } else if (sum_.size() != e.size()) {
            throw ConfigError("descriptor dimensions differ within one code");
        }
        for (std::size_t i = 0; i < e.size(); ++i) {
            sum_[i] += e[i];
            sum_unit_[i] += e[i] / n;
        }
        ++count_;
    }

    /// Appends another accumulator's totals. Merge in a fixed order for bitwise-stable results.
    void merge(const ConsistencyAccumulator& other)
    {
        if (other.count_ == 0) {
            return;
        }
        if (count_ == 0) {
            *this = other;
            return;
        }
        for (std::size_t i = 0; i < sum_.size(); ++i) {
            sum_[i] += other.sum_[i];
            sum_unit_[i] += other.sum_unit_[i];
        }
        count_ += other.count_;
    }

    std::size_t count() const noexcept { return count_; }

    ConsistencyResult result() const
    {
        if (count_ == 0) {
            throw ConfigError("consistency needs at least one nonzero descriptor");
        }
        ConsistencyResult r;
        r.count = count_;
        r.low_support = count_ == 1;
        r.mean = sum_;
        for (double& v : r.mean) {
            v /= static_cast<double>(count_);
        }
        const double mu = detail::norm(r.mean);
        // Opposing descriptors can cancel; a zero mean has no direction, so the score is 0.
        r.score = mu == 0.0 ? 0.0 : detail::dot(r.mean, sum_unit_) / (mu * static_cast<double>(count_));
        if (r.low_support) {
            r.score = 1.0;
        }
        return r;
    }

private:
    std::vector<double> sum_;
    std::vector<double> sum_unit_;
    std::size_t count_ = 0;
};

/// Mean cosine similarity between the mean descriptor and each descriptor. Zero vectors are skipped.
inline ConsistencyResult consistency(std::span<const std::vector<double>> descriptors)
{
    ConsistencyAccumulator acc;
    for (const auto& d : descriptors) {
        acc.add(d);
    }
    return acc.result();
}

// --- random-crop baseline ------------------------------------------------------------------------

struct CropSize {
    std::size_t height = 1;
    std::size_t width = 1;
    friend bool operator==(const CropSize&, const CropSize&) = default;
};

struct BaselineResult {
    std::vector<double> trial_scores;
    double mean = 0.0;
    std::size_t samples_per_trial = 0;
};

using CropEmbedder = std::function<Descriptor(const RgbImage&)>;

/// Consistency of randomly placed crops, averaged over trials. Each sample picks a frame, a size from
/// `sizes` (the empirical audited crop sizes), and a uniformly placed box that fits. `frame_at(i)`
/// returns frame i of `frame_count`.
template <typename FrameAt>
BaselineResult random_baseline(std::size_t frame_count, FrameAt&& frame_at, std::span<const CropSize> sizes,
                               std::size_t samples_per_trial, std::size_t trials, std::uint64_t seed,
                               const CropEmbedder& embed_fn = [](const RgbImage& c) { return embed_crop(c); })
{
    if (frame_count == 0) {
        throw ConfigError("random baseline needs a nonempty dataset");
    }
    if (sizes.empty() || samples_per_trial == 0 || trials == 0) {
        throw ConfigError("random baseline needs crop sizes, samples and trials");
    }
    BaselineResult r;
    r.samples_per_trial = samples_per_trial;
    for (std::size_t t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, t));
        ConsistencyAccumulator acc;
        for (std::size_t s = 0; s < samples_per_trial; ++s) {
            const RgbImage& frame = frame_at(static_cast<std::size_t>(rng.below(frame_count)));
            const CropSize size = sizes[static_cast<std::size_t>(rng.below(sizes.size()))];
            const std::size_t h = std::min(size.height, frame.height), w = std::min(size.width, frame.width);
            const std::size_t r0 = static_cast<std::size_t>(rng.below(frame.height - h + 1));
            const std::size_t c0 = static_cast<std::size_t>(rng.below(frame.width - w + 1));
            acc.add(embed_fn(crop_image(frame, BoundingBox{r0, c0, r0 + h - 1, c0 + w - 1})).values);
        }
        // Every sample can be a flat zero descriptor only with the encoder backend; score that trial 0.
        r.trial_scores.push_back(acc.count() == 0 ? 0.0 : acc.result().score);
    }
    r.mean = std::accumulate(r.trial_scores.begin(), r.trial_scores.end(), 0.0) / static_cast<double>(trials);
    return r;
}

// --- frequency -----------------------------------------------------------------------------------

struct CodeUsage {
    std::vector<std::size_t> counts;             // latent positions assigned each code
    std::vector<double> shares;                  // counts / total positions
    std::vector<std::size_t> observation_counts; // observations in which each code appears
    std::vector<double> observation_shares;      // observation_counts / observations
    std::size_t total_positions = 0;
    std::size_t observations = 0;

    std::size_t active_codes() const
    {
        return static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; }));
    }
};

/// Streaming frequency counter; merge() is associative and commutative.
class FrequencyCounter {
public:
    explicit FrequencyCounter(std::size_t codebook_size)
        : counts_(codebook_size, 0)
        , obs_(codebook_size, 0)
        , seen_(codebook_size, 0)
    {
    }

    void add(std::span<const int> grid)
    {
        std::fill(seen_.begin(), seen_.end(), 0);
        for (int c : grid) {
            if (c < 0 || static_cast<std::size_t>(c) >= counts_.size()) {
                throw ConfigError("code " + std::to_string(c) + " outside the codebook");
            }
            ++counts_[static_cast<std::size_t>(c)];
            seen_[static_cast<std::size_t>(c)] = 1;
        }
        for (std::size_t k = 0; k < seen_.size(); ++k) {
            obs_[k] += seen_[k];
        }
        positions_ += grid.size();
        ++observations_;
    }

    void merge(const FrequencyCounter& o)
    {
        for (std::size_t k = 0; k < counts_.size(); ++k) {
            counts_[k] += o.counts_[k];
            obs_[k] += o.obs_[k];
        }
        positions_ += o.positions_;
        observations_ += o.observations_;
    }

    CodeUsage result() const
    {
        CodeUsage u;
        u.counts = counts_;
        u.observation_counts = obs_;
        u.total_positions = positions_;
        u.observations = observations_;
        u.shares.assign(counts_.size(), 0.0);
        u.observation_shares.assign(counts_.size(), 0.0);
        for (std::size_t k = 0; k < counts_.size(); ++k) {
            if (positions_ > 0) {
                u.shares[k] = static_cast<double>(counts_[k]) / static_cast<double>(positions_);
            }
            if (observations_ > 0) {
                u.observation_shares[k] = static_cast<double>(obs_[k]) / static_cast<double>(observations_);
            }
        }
        return u;
    }

private:
    std::vector<std::size_t> counts_;
    std::vector<std::size_t> obs_;
    std::vector<std::uint8_t> seen_;
    std::size_t positions_ = 0;
    std::size_t observations_ = 0;
};

inline CodeUsage code_frequency(std::span<const std::vector<int>> grids, std::size_t codebook_size)
{
    FrequencyCounter f(codebook_size);
    for (const auto& g : grids) {
        f.add(g);
    }
    return f.result();
}

// --- co-occurrence -------------------------------------------------------------------------------

struct CooccurrenceMatrix {
    std::size_t size = 0;
    std::vector<double> rates;                    // size x size, row-major, zero diagonal
    std::vector<std::size_t> joint;               // n_ij, diagonal holds n_i
    std::vector<std::size_t> episodes_together;   // distinct episodes in which i and j co-occur
    std::vector<std::size_t> appearances;         // n_i

    double rate(std::size_t i, std::size_t j) const { return rates[i * size + j]; }
    std::size_t together(std::size_t i, std::size_t j) const { return joint[i * size + j]; }
};

/// rate(i, j) = n_ij / ((n_i + n_j) / 2), where counts are over observations and a code appears in an
/// observation if it is selected anywhere in it. `episodes` (optional, one id per observation) feeds the
/// distinct-episode count per pair.
inline CooccurrenceMatrix cooccurrence(std::span<const std::vector<int>> code_sets, std::size_t codebook_size,
                                       std::span<const std::size_t> episodes = {})
{
    if (!episodes.empty() && episodes.size() != code_sets.size()) {
        throw ConfigError("one episode id per observation is required");
    }
    const std::size_t k = codebook_size;
    CooccurrenceMatrix m;
    m.size = k;
    m.rates.assign(k * k, 0.0);
    m.joint.assign(k * k, 0);
    m.episodes_together.assign(k * k, 0);
    m.appearances.assign(k, 0);

    std::vector<std::size_t> order(code_sets.size());
    std::iota(order.begin(), order.end(), 0);
    if (!episodes.empty()) {
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return episodes[a] < episodes[b]; });
    }
    constexpr auto kNone = static_cast<std::size_t>(-1);
    std::vector<std::size_t> last_episode(k * k, kNone);
    std::vector<int> codes;
    for (std::size_t o : order) {
        codes = code_sets[o];
        std::sort(codes.begin(), codes.end());
        codes.erase(std::unique(codes.begin(), codes.end()), codes.end());
        for (int c : codes) {
            if (c < 0 || static_cast<std::size_t>(c) >= k) {
                throw ConfigError("code " + std::to_string(c) + " outside the codebook");
            }
        }
        for (std::size_t a = 0; a < codes.size(); ++a) {
            const auto i = static_cast<std::size_t>(codes[a]);
            ++m.appearances[i];
            for (std::size_t b = a; b < codes.size(); ++b) {
                const auto j = static_cast<std::size_t>(codes[b]);
                ++m.joint[i * k + j];
                if (!episodes.empty() && last_episode[i * k + j] != episodes[o]) {
                    last_episode[i * k + j] = episodes[o];
                    ++m.episodes_together[i * k + j];
                }
            }
        }
    }
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = i + 1; j < k; ++j) {
            m.joint[j * k + i] = m.joint[i * k + j];
            m.episodes_together[j * k + i] = m.episodes_together[i * k + j];
            const double avg = 0.5 * static_cast<double>(m.appearances[i] + m.appearances[j]);
            const double r = avg == 0.0 ? 0.0 : static_cast<double>(m.joint[i * k + j]) / avg;
            m.rates[i * k + j] = m.rates[j * k + i] = r;
        }
    }
    return m;
}

struct CodePair {
    std::size_t i = 0;
    std::size_t j = 0;
    double rate = 0.0;
    std::size_t together = 0;
    std::size_t episodes = 0;
};

/// The k highest off-diagonal rates over pairs i < j, ties in (i, j) order.
inline std::vector<CodePair> top_pairs(const CooccurrenceMatrix& m, std::size_t k = 10)
{
    std::vector<CodePair> pairs;
    for (std::size_t i = 0; i < m.size; ++i) {
        for (std::size_t j = i + 1; j < m.size; ++j) {
            pairs.push_back({i, j, m.rate(i, j), m.together(i, j), m.episodes_together[i * m.size + j]});
        }
    }
    const std::size_t n = std::min(k, pairs.size());
    std::partial_sort(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(n), pairs.end(),
                      [](const CodePair& a, const CodePair& b) {
                          if (a.rate != b.rate) {
                              return a.rate > b.rate;
                          }
                          return std::tie(a.i, a.j) < std::tie(b.i, b.j);
                      });
    pairs.resize(n);
    return pairs;
}

// --- selection for projection --------------------------------------------------------------------

struct CodeScore {
    int code = 0;
    std::size_t count = 0;
    std::optional<double> consistency;
};

/// Codes with at least `min_count` embeddings, by consistency descending (ties: lower code id), first top_k.
inline std::vector<int> select_for_projection(std::span<const CodeScore> reports, std::size_t top_k,
                                              std::size_t min_count)
{
    std::vector<CodeScore> eligible;
    for (const auto& r : reports) {
        if (r.count >= min_count && r.consistency) {
            eligible.push_back(r);
        }
    }
    std::sort(eligible.begin(), eligible.end(), [](const CodeScore& a, const CodeScore& b) {
        if (*a.consistency != *b.consistency) {
            return *a.consistency > *b.consistency;
        }
        return a.code < b.code;
    });
    std::vector<int> out;
    for (std::size_t i = 0; i < std::min(top_k, eligible.size()); ++i) {
        out.push_back(eligible[i].code);
    }
    return out;
}

// --- purity --------------------------------------------------------------------------------------

struct PurityEntry {
    std::size_t crops = 0;
    std::map<int, std::size_t> histogram; // label -> crops
    int dominant_label = -1;
    double purity = 0.0;
    double entropy_bits = 0.0;
};

/// Label histogram, modal label (ties to the lowest id), its share, and Shannon entropy in bits.
inline PurityEntry purity_of(std::span<const int> labels)
{
    PurityEntry p;
    p.crops = labels.size();
    for (int l : labels) {
        ++p.histogram[l];
    }
    if (labels.empty()) {
        return p;
    }
    std::size_t best = 0;
    for (const auto& [label, count] : p.histogram) {
        if (count > best) {
            best = count;
            p.dominant_label = label;
        }
        const double q = static_cast<double>(count) / static_cast<double>(labels.size());
        p.entropy_bits -= q * std::log2(q);
    }
    p.purity = static_cast<double>(best) / static_cast<double>(labels.size());
    // A single label has exactly zero entropy; avoid printing -0.
    p.entropy_bits = std::max(0.0, p.entropy_bits);
    return p;
}

/// Per-code purity from crops labelled by the modal entity id of their masks.
inline std::vector<PurityEntry> purity(std::span<const CropRecord> crops, std::size_t codebook_size)
{
    std::vector<std::vector<int>> labels(codebook_size);
    for (const auto& c : crops) {
        if (c.code < 0 || static_cast<std::size_t>(c.code) >= codebook_size) {
            throw ConfigError("crop code outside the codebook");
        }
        labels[static_cast<std::size_t>(c.code)].push_back(modal_label(c.mask));
    }
    std::vector<PurityEntry> out;
    for (const auto& l : labels) {
        out.push_back(purity_of(l));
    }
    return out;
}

} // namespace vqa

#endif
