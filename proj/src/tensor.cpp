#include "refgen/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "refgen/rng.hpp"

namespace refgen {

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0)
            throw std::invalid_argument("negative tensor dimension");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    data_.assign((size_t)shape_numel(shape_), 0.0);
}

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_)
        x = v;
    return t;
}

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<double> data) {
    if (shape_numel(shape) != (int64_t)data.size())
        throw std::invalid_argument("tensor data size does not match shape");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_  = std::move(data);
    return t;
}

Tensor Tensor::randn(std::vector<int64_t> shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_)
        x = rng.normal() * stddev;
    return t;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); i++)
        os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
}

Tensor Tensor::reshaped(std::vector<int64_t> shape) const {
    if (shape_numel(shape) != numel())
        throw std::invalid_argument("reshape changes element count " + shape_str());
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (double x : data_)
        m = std::max(m, std::fabs(x));
    return m;
}

double Tensor::max_abs_diff(const Tensor& o) const {
    if (!same_shape(o))
        throw std::invalid_argument("max_abs_diff shape mismatch " + shape_str() + " vs " + o.shape_str());
    double m = 0.0;
    for (int64_t i = 0; i < numel(); i++)
        m = std::max(m, std::fabs(data_[(size_t)i] - o.data_[(size_t)i]));
    return m;
}

bool Tensor::bitwise_equal(const Tensor& o) const {
    if (!same_shape(o))
        return false;
    if (data_.empty())
        return true;
    return std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(double)) == 0;
}

}  // namespace refgen
