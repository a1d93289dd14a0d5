#ifndef VQAUDIT_REGIONS_HPP
#define VQAUDIT_REGIONS_HPP

#include "image.hpp"
#include "saliency.hpp"

#include <algorithm>
#include <cstdint>
#include <tuple>
#include <vector>

namespace vqa {

/// Inclusive pixel bounds.
struct BoundingBox {
    std::size_t row_min = 0;
    std::size_t col_min = 0;
    std::size_t row_max = 0;
    std::size_t col_max = 0;

    std::size_t height() const { return row_max - row_min + 1; }
    std::size_t width() const { return col_max - col_min + 1; }
    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct BinaryMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> on;

    bool at(std::size_t y, std::size_t x) const { return on[y * width + x] != 0; }
    std::size_t count() const { return static_cast<std::size_t>(std::count(on.begin(), on.end(), 1)); }
};

struct ActivationComponent {
    std::vector<std::size_t> pixels; // row-major linear indices, ascending
    BoundingBox bbox;

    std::size_t area() const { return pixels.size(); }
};

/// mask(p) = heatmap(p) >= tau. A zero heatmap yields an empty mask for every tau.
inline BinaryMask threshold_mask(const Heatmap& heatmap, double tau)
{
    BinaryMask m{heatmap.height, heatmap.width, std::vector<std::uint8_t>(heatmap.values.size(), 0)};
    if (heatmap.is_zero) {
        return m;
    }
    for (std::size_t i = 0; i < heatmap.values.size(); ++i) {
        m.on[i] = heatmap.values[i] >= tau ? 1 : 0;
    }
    return m;
}

/// Maximal 4- or 8-connected sets of on-pixels, ordered by (row_min, col_min).
inline std::vector<ActivationComponent> connected_components(const BinaryMask& mask, int connectivity = 8)
{
    if (connectivity != 4 && connectivity != 8) {
        throw ConfigError("connectivity must be 4 or 8");
    }
    const std::size_t h = mask.height, w = mask.width;
    std::vector<std::uint8_t> seen(h * w, 0);
    std::vector<ActivationComponent> out;
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < h * w; ++start) {
        if (!mask.on[start] || seen[start]) {
            continue;
        }
        ActivationComponent comp;
        comp.bbox = {start / w, start % w, start / w, start % w};
        seen[start] = 1;
        stack.assign(1, start);
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            comp.pixels.push_back(p);
            const std::size_t y = p / w, x = p % w;
            comp.bbox.row_min = std::min(comp.bbox.row_min, y);
            comp.bbox.row_max = std::max(comp.bbox.row_max, y);
            comp.bbox.col_min = std::min(comp.bbox.col_min, x);
            comp.bbox.col_max = std::max(comp.bbox.col_max, x);
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    if ((dy == 0 && dx == 0) || (connectivity == 4 && dy != 0 && dx != 0)) {
                        continue;
                    }
                    const long ny = static_cast<long>(y) + dy, nx = static_cast<long>(x) + dx;
                    if (ny < 0 || nx < 0 || ny >= static_cast<long>(h) || nx >= static_cast<long>(w)) {
                        continue;
                    }
                    const std::size_t q = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
                    if (mask.on[q] && !seen[q]) {
                        seen[q] = 1;
                        stack.push_back(q);
                    }
                }
            }
        }
        std::sort(comp.pixels.begin(), comp.pixels.end());
        out.push_back(std::move(comp));
    }
    // Discovery order is by first raster pixel; re-sort by (row_min, col_min) with that as tiebreak.
    std::stable_sort(out.begin(), out.end(), [](const ActivationComponent& a, const ActivationComponent& b) {
        return std::tie(a.bbox.row_min, a.bbox.col_min) < std::tie(b.bbox.row_min, b.bbox.col_min);
    });
    return out;
}

inline std::vector<ActivationComponent> filter_by_area(std::vector<ActivationComponent> components,
                                                       std::size_t min_area)
{
    std::erase_if(components, [&](const ActivationComponent& c) { return c.area() < min_area; });
    return components;
}

/// A bounding-box crop attributed to one code. `descriptor` is filled by an embedder.
struct CropRecord {
    int code = 0;
    std::size_t episode = 0;
    std::size_t step = 0;
    BoundingBox bbox;
    std::size_t area = 0; // pixels of the component, not of the box
    RgbImage image;
    LabelImage mask;
    std::vector<double> descriptor;
    bool flat = false;
};

inline RgbImage crop_image(const RgbImage& src, const BoundingBox& b)
{
    if (b.row_max >= src.height || b.col_max >= src.width || b.row_min > b.row_max || b.col_min > b.col_max) {
        throw ConfigError("bounding box outside the image");
    }
    RgbImage out(b.width(), b.height());
    for (std::size_t y = 0; y < out.height; ++y) {
        const auto* row = &src.pixels[((b.row_min + y) * src.width + b.col_min) * 3];
        std::copy(row, row + out.width * 3, &out.pixels[y * out.width * 3]);
    }
    return out;
}

inline LabelImage crop_labels(const LabelImage& src, const BoundingBox& b)
{
    if (b.row_max >= src.height || b.col_max >= src.width || b.row_min > b.row_max || b.col_min > b.col_max) {
        throw ConfigError("bounding box outside the label image");
    }
    LabelImage out(b.width(), b.height());
    for (std::size_t y = 0; y < out.height; ++y) {
        const auto* row = &src.labels[(b.row_min + y) * src.width + b.col_min];
        std::copy(row, row + out.width, &out.labels[y * out.width]);
    }
    return out;
}

/// Pixel-exact sub-image and sub-mask at the component's bounding box.
inline CropRecord crop(const RgbImage& frame, const LabelImage& mask, const ActivationComponent& component)
{
    CropRecord r;
    r.bbox = component.bbox;
    r.area = component.area();
    r.image = crop_image(frame, component.bbox);
    r.mask = crop_labels(mask, component.bbox);
    return r;
}

/// Most frequent label in a crop mask; ties go to the lowest id.
inline std::uint8_t modal_label(const LabelImage& mask)
{
    std::array<std::size_t, 256> counts{};
    for (auto v : mask.labels) {
        ++counts[v];
    }
    return static_cast<std::uint8_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

} // namespace vqa

#endif
