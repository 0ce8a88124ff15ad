#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace scseg {

using Shape = std::vector<std::size_t>;

/// Raised when operand extents do not fit an operation's contract.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a value lies outside an operation's mathematical domain
/// (log of a non-positive number, zero-norm cosine operand, ...).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape);

/// Dense row-major tensor. The last axis is contiguous.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {}
    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != numel(shape)) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + to_string(shape));
        }
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t axis) const { return shape.at(axis); }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }
};

/// A persistent trainable leaf: value plus an accumulated gradient of the same shape.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {
        value.requires_grad = true;
    }

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
};

/// True when every element is finite.
template <typename T>
bool all_finite(const std::vector<T>& values);

}  // namespace scseg
