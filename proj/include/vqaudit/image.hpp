#ifndef VQAUDIT_IMAGE_HPP
#define VQAUDIT_IMAGE_HPP

#include "errors.hpp"
#include "tensor.hpp"

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace vqa {

/// 8-bit RGB image, interleaved, row-major.
struct RgbImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;

    RgbImage() = default;
    RgbImage(std::size_t w, std::size_t h, std::uint8_t fill = 0)
        : width(w)
        , height(h)
        , pixels(w * h * 3, fill)
    {
    }

    std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
    std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

    friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// Single-channel 8-bit label image.
struct LabelImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> labels;

    LabelImage() = default;
    LabelImage(std::size_t w, std::size_t h, std::uint8_t fill = 0)
        : width(w)
        , height(h)
        , labels(w * h, fill)
    {
    }

    std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }

    friend bool operator==(const LabelImage&, const LabelImage&) = default;
};

using Rgb = std::array<std::uint8_t, 3>;

/// RGB bytes scaled to [0, 1] as a 3xHxW tensor.
inline Tensor to_tensor(const RgbImage& img)
{
    Tensor t({3, img.height, img.width});
    for (std::size_t y = 0; y < img.height; ++y) {
        for (std::size_t x = 0; x < img.width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                t.at(c, y, x) = img.at(y, x, c) / 255.0;
            }
        }
    }
    return t;
}

/// Inverse of to_tensor; values are clamped to [0, 1] and rounded.
inline RgbImage to_image(const Tensor& t)
{
    RgbImage img(t.dim(2), t.dim(1));
    for (std::size_t y = 0; y < img.height; ++y) {
        for (std::size_t x = 0; x < img.width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = std::clamp(t.at(c, y, x), 0.0, 1.0);
                img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
        }
    }
    return img;
}

/// Bilinear resampling with half-pixel centers and edge clamping. `src` is row-major
/// with `channels` interleaved values per pixel. Equal sizes copy exactly.
inline std::vector<double> resize_bilinear(std::span<const double> src, std::size_t src_h, std::size_t src_w,
                                           std::size_t channels, std::size_t dst_h, std::size_t dst_w)
{
    std::vector<double> dst(dst_h * dst_w * channels);
    if (src_h == dst_h && src_w == dst_w) {
        std::copy(src.begin(), src.end(), dst.begin());
        return dst;
    }
    const double sy = static_cast<double>(src_h) / static_cast<double>(dst_h);
    const double sx = static_cast<double>(src_w) / static_cast<double>(dst_w);
    for (std::size_t y = 0; y < dst_h; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(src_h - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, src_h - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < dst_w; ++x) {
            const double fx =
                std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(src_w - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, src_w - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < channels; ++c) {
                const auto s = [&](std::size_t yy, std::size_t xx) { return src[(yy * src_w + xx) * channels + c]; };
                const double top = s(y0, x0) * (1.0 - wx) + s(y0, x1) * wx;
                const double bottom = s(y1, x0) * (1.0 - wx) + s(y1, x1) * wx;
                dst[(y * dst_w + x) * channels + c] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    return dst;
}

/// Nearest-neighbour resampling with half-pixel centers.
inline std::vector<double> resize_nearest(std::span<const double> src, std::size_t src_h, std::size_t src_w,
                                          std::size_t dst_h, std::size_t dst_w)
{
    std::vector<double> dst(dst_h * dst_w);
    for (std::size_t y = 0; y < dst_h; ++y) {
        const std::size_t sy = std::min(src_h - 1, (y * src_h) / dst_h);
        for (std::size_t x = 0; x < dst_w; ++x) {
            const std::size_t sx = std::min(src_w - 1, (x * src_w) / dst_w);
            dst[y * dst_w + x] = src[sy * src_w + sx];
        }
    }
    return dst;
}

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes, std::uint32_t seed = 0)
{
    uLong crc = seed;
    std::size_t offset = 0;
    while (offset < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - offset, 1u << 30));
        crc = ::crc32(crc, bytes.data() + offset, chunk);
        offset += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw LoadError("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("short write to " + path.string());
    }
}

inline std::string crc32_hex(std::uint32_t crc)
{
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", crc);
    return buf;
}

namespace detail {

struct PngBuffer {
    std::vector<std::uint8_t> bytes;
    std::size_t cursor = 0;
};

extern "C" inline void png_write_to_vector(png_structp png, png_bytep data, png_size_t length)
{
    auto* buf = static_cast<PngBuffer*>(png_get_io_ptr(png));
    buf->bytes.insert(buf->bytes.end(), data, data + length);
}

extern "C" inline void png_flush_noop(png_structp) {}

extern "C" inline void png_read_from_vector(png_structp png, png_bytep data, png_size_t length)
{
    auto* buf = static_cast<PngBuffer*>(png_get_io_ptr(png));
    if (buf->cursor + length > buf->bytes.size()) {
        png_error(png, "truncated PNG data");
    }
    std::copy_n(buf->bytes.data() + buf->cursor, length, data);
    buf->cursor += length;
}

/// Encode 8-bit rows. `palette` non-empty selects a palette-indexed image.
inline bool encode_png(PngBuffer& out, const std::uint8_t* rows, std::size_t width, std::size_t height,
                       int channels, const std::vector<png_color>& palette)
{
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) {
        return false;
    }
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        return false;
    }
    png_set_write_fn(png, &out, png_write_to_vector, png_flush_noop);
    png_set_compression_level(png, 6);
    const int color_type = palette.empty() ? (channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY)
                                           : PNG_COLOR_TYPE_PALETTE;
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    if (!palette.empty()) {
        png_set_PLTE(png, info, palette.data(), static_cast<int>(palette.size()));
    }
    png_write_info(png, info);
    const std::size_t stride = width * static_cast<std::size_t>(channels);
    for (std::size_t y = 0; y < height; ++y) {
        png_write_row(png, const_cast<png_bytep>(rows + y * stride));
    }
    png_write_end(png, info);
    png_destroy_write_struct(&png, &info);
    return true;
}

struct DecodedPng {
    std::size_t width = 0;
    std::size_t height = 0;
    int color_type = 0;
    std::vector<std::uint8_t> data;
};

inline bool decode_png(PngBuffer& in, DecodedPng& out)
{
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) {
        return false;
    }
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        return false;
    }
    png_set_read_fn(png, &in, png_read_from_vector);
    png_read_info(png, info);
    out.width = png_get_image_width(png, info);
    out.height = png_get_image_height(png, info);
    out.color_type = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) != 8
        || (out.color_type != PNG_COLOR_TYPE_RGB && out.color_type != PNG_COLOR_TYPE_PALETTE
            && out.color_type != PNG_COLOR_TYPE_GRAY)) {
        png_destroy_read_struct(&png, &info, nullptr);
        return false;
    }
    const std::size_t stride = png_get_rowbytes(png, info);
    out.data.resize(stride * out.height);
    for (std::size_t y = 0; y < out.height; ++y) {
        png_read_row(png, out.data.data() + y * stride, nullptr);
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return true;
}

} // namespace detail

inline std::vector<std::uint8_t> encode_rgb_png(const RgbImage& img)
{
    detail::PngBuffer buf;
    if (img.width == 0 || img.height == 0 || !detail::encode_png(buf, img.pixels.data(), img.width, img.height, 3, {})) {
        throw IoError("PNG encoding failed");
    }
    return std::move(buf.bytes);
}

inline std::vector<std::uint8_t> encode_indexed_png(const LabelImage& img, std::span<const Rgb> palette)
{
    std::vector<png_color> pal;
    for (const auto& c : palette) {
        pal.push_back({c[0], c[1], c[2]});
    }
    detail::PngBuffer buf;
    if (img.width == 0 || img.height == 0 || pal.empty()
        || !detail::encode_png(buf, img.labels.data(), img.width, img.height, 1, pal)) {
        throw IoError("PNG encoding failed");
    }
    return std::move(buf.bytes);
}

inline void write_rgb_png(const std::filesystem::path& path, const RgbImage& img)
{
    write_file_bytes(path, encode_rgb_png(img));
}

inline void write_indexed_png(const std::filesystem::path& path, const LabelImage& img, std::span<const Rgb> palette)
{
    write_file_bytes(path, encode_indexed_png(img, palette));
}

inline RgbImage read_rgb_png(const std::filesystem::path& path)
{
    detail::PngBuffer buf{read_file_bytes(path), 0};
    detail::DecodedPng png;
    if (!detail::decode_png(buf, png) || png.color_type != PNG_COLOR_TYPE_RGB) {
        throw LoadError("not an 8-bit RGB PNG: " + path.string());
    }
    RgbImage img(png.width, png.height);
    img.pixels = std::move(png.data);
    return img;
}

/// Reads raw palette indices (or gray levels) without expanding them to colors.
inline LabelImage read_indexed_png(const std::filesystem::path& path)
{
    detail::PngBuffer buf{read_file_bytes(path), 0};
    detail::DecodedPng png;
    if (!detail::decode_png(buf, png) || png.color_type == PNG_COLOR_TYPE_RGB) {
        throw LoadError("not an 8-bit indexed PNG: " + path.string());
    }
    LabelImage img(png.width, png.height);
    img.labels = std::move(png.data);
    return img;
}

} // namespace vqa

#endif
