#include "qsv/tensor.hpp"

#include <cmath>
#include <sstream>

#include "qsv/error.hpp"

namespace qsv {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
        raise_shape("tensor: shape ", shape_str(shape_), " needs ",
                    shape_numel(shape_), " elements, got ", data_.size());
    }
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = rng.next_uniform(lo, hi);
    return t;
}

Tensor Tensor::gaussian(Shape shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = stddev * rng.next_gaussian();
    return t;
}

double Tensor::value() const {
    if (data_.size() != 1) {
        raise_shape("tensor: value() on non-scalar of shape ", shape_str(shape_));
    }
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
        raise_shape("tensor: cannot reshape ", shape_str(shape_), " to ",
                    shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
    for (double x : data_) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

}  // namespace qsv
