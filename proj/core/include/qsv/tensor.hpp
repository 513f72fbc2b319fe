#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "qsv/rng.hpp"

namespace qsv {

using Shape = std::vector<size_t>;

std::string shape_str(const Shape& s);

/// Dense row-major array of f64. Rank 0 (empty shape) is a scalar with one
/// element. All pipeline math runs on these; autodiff nodes own two of them.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);
    Tensor(Shape shape, double fill);

    static Tensor scalar(double v);
    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
    /// Entries ~ U(lo, hi) from the given generator (consumed in flat order).
    static Tensor uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0);
    /// Entries ~ N(0, std^2).
    static Tensor gaussian(Shape shape, Rng& rng, double stddev = 1.0);

    const Shape& shape() const { return shape_; }
    size_t rank() const { return shape_.size(); }
    size_t dim(size_t i) const { return shape_[i]; }
    size_t numel() const { return data_.size(); }
    bool is_scalar() const { return shape_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    double& at(size_t i, size_t j) { return data_[i * shape_[1] + j]; }
    double at(size_t i, size_t j) const { return data_[i * shape_[1] + j]; }
    double& at(size_t i, size_t j, size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at(size_t i, size_t j, size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    double value() const;  // scalar read; throws if numel != 1

    /// Same data reinterpreted under a new shape (element count must match).
    Tensor reshaped(Shape shape) const;

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;

private:
    Shape shape_;
    std::vector<double> data_;
};

size_t shape_numel(const Shape& s);

}  // namespace qsv
