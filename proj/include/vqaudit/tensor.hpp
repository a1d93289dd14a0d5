#ifndef VQAUDIT_TENSOR_HPP
#define VQAUDIT_TENSOR_HPP

#include "errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace vqa {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_volume(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major tensor of doubles.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape))
    {
        check_shape(shape_);
        data_.assign(shape_volume(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape))
        , data_(std::move(data))
    {
        check_shape(shape_);
        if (data_.size() != shape_volume(shape_)) {
            throw ConfigError("tensor data length " + std::to_string(data_.size()) + " does not match shape "
                              + shape_string(shape_));
        }
    }

    Tensor(std::initializer_list<std::size_t> shape, double fill = 0.0)
        : Tensor(Shape(shape), fill)
    {
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& values() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    double& at(std::size_t c, std::size_t y, std::size_t x) noexcept
    {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }
    double at(std::size_t c, std::size_t y, std::size_t x) const noexcept
    {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }
    double& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) noexcept
    {
        return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    double at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept
    {
        return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    /// Same data, new shape of equal volume.
    Tensor reshaped(Shape shape) const
    {
        Tensor t;
        check_shape(shape);
        if (shape_volume(shape) != data_.size()) {
            throw ConfigError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        }
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    bool all_finite() const noexcept
    {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    Tensor& operator+=(const Tensor& other)
    {
        require_same_shape(other, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            data_[i] += other.data_[i];
        }
        return *this;
    }

    Tensor& operator*=(double s) noexcept
    {
        for (auto& v : data_) {
            v *= s;
        }
        return *this;
    }

    void require_same_shape(const Tensor& other, const char* what) const
    {
        if (shape_ != other.shape_) {
            throw ConfigError(std::string(what) + ": shape mismatch " + shape_string(shape_) + " vs "
                              + shape_string(other.shape_));
        }
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    static void check_shape(const Shape& shape)
    {
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (shape[i] == 0) {
                throw ConfigError("tensor dimension " + std::to_string(i) + " is zero in " + shape_string(shape));
            }
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

/// Slice image `n` out of a rank-4 batch.
inline Tensor batch_item(const Tensor& batch, std::size_t n)
{
    const Shape item{batch.dim(1), batch.dim(2), batch.dim(3)};
    const std::size_t stride = shape_volume(item);
    std::vector<double> data(batch.values().begin() + static_cast<std::ptrdiff_t>(n * stride),
                             batch.values().begin() + static_cast<std::ptrdiff_t>((n + 1) * stride));
    return Tensor(item, std::move(data));
}

/// Stack equally shaped rank-3 tensors into a rank-4 batch.
inline Tensor stack(std::span<const Tensor> items)
{
    if (items.empty()) {
        throw ConfigError("cannot stack an empty list of tensors");
    }
    Shape shape{items.size()};
    shape.insert(shape.end(), items[0].shape().begin(), items[0].shape().end());
    std::vector<double> data;
    data.reserve(shape_volume(shape));
    for (const auto& t : items) {
        items[0].require_same_shape(t, "stack");
        data.insert(data.end(), t.values().begin(), t.values().end());
    }
    return Tensor(std::move(shape), std::move(data));
}

} // namespace vqa

#endif
