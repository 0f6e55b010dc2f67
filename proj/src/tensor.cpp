#include "elytra/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "elytra/error.hpp"

namespace elytra {

std::size_t shape_numel(const Shape &shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape &shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {
void check_shape(const Shape &shape) {
    if (shape.empty()) {
        throw DimensionError("tensor shape must have at least one axis");
    }
    for (auto d : shape) {
        if (d == 0) {
            throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
        }
    }
}
} // namespace

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (shape_numel(shape_) != data_.size()) {
        throw DimensionError("shape " + shape_str(shape_) + " needs " + std::to_string(shape_numel(shape_)) +
                             " elements, got " + std::to_string(data_.size()));
    }
}

Tensor Tensor::from(Shape shape, std::initializer_list<float> values) {
    return Tensor(std::move(shape), std::vector<float>(values));
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) {
        t.at(i, i) = 1.0f;
    }
    return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw IndexError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    }
    return shape_[axis];
}

std::size_t Tensor::rows() const {
    if (shape_.size() == 1) {
        return 1;
    }
    if (shape_.size() != 2) {
        throw DimensionError("expected a matrix, got " + shape_str(shape_));
    }
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (shape_.size() == 1) {
        return shape_[0];
    }
    if (shape_.size() != 2) {
        throw DimensionError("expected a matrix, got " + shape_str(shape_));
    }
    return shape_[1];
}

float Tensor::item() const {
    if (data_.size() != 1) {
        throw ContractError("item() on tensor of shape " + shape_str(shape_));
    }
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
        throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

void Tensor::require_finite(const std::string &context) const {
    if (!all_finite()) {
        throw NumericError("non-finite value produced by " + context);
    }
}

bool Tensor::bit_equal(const Tensor &other) const noexcept {
    return shape_ == other.shape_ && data_.size() == other.data_.size() &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0);
}

float max_abs_diff(const Tensor &a, const Tensor &b) {
    if (a.numel() != b.numel()) {
        throw DimensionError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    float m = 0.0f;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::fabs(a[i] - b[i]));
    }
    return m;
}

} // namespace elytra
