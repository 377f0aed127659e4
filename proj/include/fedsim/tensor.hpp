// Copyright (c) 2026 fedsim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fedsim/error.hpp"

namespace fedsim {

/// Dense row-major tensor of 64-bit floats. Rank and extents are dynamic;
/// all arithmetic in the library runs in double precision.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != count(shape_)) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t extent(std::size_t dim) const { return shape_.at(dim); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t flat) { return data_[flat]; }
    double operator[](std::size_t flat) const { return data_[flat]; }

    double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    double& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Tensor& operator+=(const Tensor& other) {
        require_same_shape(other, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
        return *this;
    }

    Tensor& operator-=(const Tensor& other) {
        require_same_shape(other, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
        return *this;
    }

    Tensor& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

    /// this += s * other
    Tensor& add_scaled(const Tensor& other, double s) {
        require_same_shape(other, "add_scaled");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * other.data_[i];
        return *this;
    }

    static std::string shape_string(const std::vector<std::size_t>& shape) {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) os << ", ";
            os << shape[i];
        }
        os << ']';
        return os.str();
    }

    std::string shape_string() const { return shape_string(shape_); }

private:
    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t e : shape) n *= e;
        return n;
    }

    void require_same_shape(const Tensor& other, const char* op) const {
        if (!same_shape(other)) {
            throw DimensionError(std::string("tensor ") + op + " shape mismatch: " +
                                 shape_string() + " vs " + other.shape_string());
        }
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
inline Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
inline Tensor operator*(Tensor a, double s) { return a *= s; }
inline Tensor operator*(double s, Tensor a) { return a *= s; }

inline bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && a.values() == b.values();
}

inline double dot(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size())
        throw DimensionError("dot length mismatch: " + a.shape_string() + " vs " + b.shape_string());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw DimensionError("max_abs_diff shape mismatch: " + a.shape_string() + " vs " +
                             b.shape_string());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

} // namespace fedsim
