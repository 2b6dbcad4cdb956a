#include "derfkit/tensor.hpp"

#include "derfkit/errors.hpp"

#include <cmath>
#include <sstream>

namespace derfkit {

std::string shape_to_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ", ";
        out << shape[i];
    }
    out << ']';
    return out.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

Tensor::Tensor(Shape shape) : Tensor(std::move(shape), 0.0) {}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    for (std::size_t d : shape_) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape_));
    }
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    for (std::size_t d : shape_) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape_));
    }
    if (data_.size() != shape_numel(shape_)) {
        throw ShapeError("data size " + std::to_string(data_.size()) +
                         " does not match shape " + shape_to_string(shape_));
    }
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(shape_));
    }
    return shape_[axis];
}

double Tensor::item() const {
    if (data_.size() != 1) {
        throw ShapeError("item() requires a 1-element tensor, got shape " + shape_to_string(shape_));
    }
    return data_[0];
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor Tensor::reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != data_.size()) {
        throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " +
                         shape_to_string(new_shape));
    }
    return Tensor(std::move(new_shape), data_);
}

} // namespace derfkit
