#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace elytra {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape &shape);
std::string shape_str(const Shape &shape);

/// Dense row-major f32 array. Value type: copies are deep.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
    static Tensor full(Shape shape, float value) { return Tensor(std::move(shape), value); }
    static Tensor from(Shape shape, std::initializer_list<float> values);
    static Tensor identity(std::size_t n);
    static Tensor scalar(float value) { return Tensor(Shape{1}, value); }

    const Shape &shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    /// Rows/cols of a 2-D view; a 1-D tensor is treated as a single row.
    std::size_t rows() const;
    std::size_t cols() const;

    float *data() noexcept { return data_.data(); }
    const float *data() const noexcept { return data_.data(); }
    std::span<float> values() noexcept { return data_; }
    std::span<const float> values() const noexcept { return data_; }
    const std::vector<float> &storage() const noexcept { return data_; }

    float &operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }
    float &at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    /// Scalar value of a single-element tensor.
    float item() const;

    Tensor reshaped(Shape shape) const;
    void fill(float value);

    bool all_finite() const noexcept;
    /// Throws NumericError naming `context` if any element is NaN/Inf.
    void require_finite(const std::string &context) const;

    /// Bitwise equality of shape and payload.
    bool bit_equal(const Tensor &other) const noexcept;

private:
    Shape shape_;
    std::vector<float> data_;
};

float max_abs_diff(const Tensor &a, const Tensor &b);

} // namespace elytra
