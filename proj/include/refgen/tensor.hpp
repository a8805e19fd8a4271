#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace refgen {

class Rng;

/*
 * Dense row-major tensor of doubles. Double precision keeps every
 * finite-difference and transparency tolerance in this project solidly
 * inside machine accuracy at toy scale.
 */
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape);

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int64_t> shape, double v);
    static Tensor from(std::vector<int64_t> shape, std::vector<double> data);
    static Tensor scalar(double v) { return from({1}, {v}); }
    static Tensor randn(std::vector<int64_t> shape, Rng& rng, double stddev = 1.0);

    int64_t numel() const { return (int64_t)data_.size(); }
    int rank() const { return (int)shape_.size(); }
    int64_t dim(int i) const { return shape_[(size_t)i]; }
    const std::vector<int64_t>& shape() const { return shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](int64_t i) { return data_[(size_t)i]; }
    double operator[](int64_t i) const { return data_[(size_t)i]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool empty() const { return data_.empty(); }
    std::string shape_str() const;

    Tensor reshaped(std::vector<int64_t> shape) const;

    double max_abs() const;
    double max_abs_diff(const Tensor& o) const;  // shapes must match
    bool bitwise_equal(const Tensor& o) const;

private:
    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

int64_t shape_numel(const std::vector<int64_t>& shape);

}  // namespace refgen
