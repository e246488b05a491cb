#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

namespace costa {

// Dense row-major tensor. Real is float for training/storage and double for
// the finite-difference and loss-accumulation paths.
template <class Real>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<Real> data;

    Tensor() = default;
    explicit Tensor(std::initializer_list<int64_t> s) : shape(s) { data.assign(numel(shape), Real(0)); }
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) { data.assign(numel(shape), Real(0)); }

    static int64_t numel(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) n *= d;
        return n;
    }
    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
    int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    Real& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    Real at(int64_t i) const { return data[static_cast<size_t>(i)]; }
    Real& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * cols() + j)]; }
    Real at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * cols() + j)]; }

    Real* row(int64_t i) { return data.data() + i * cols(); }
    const Real* row(int64_t i) const { return data.data() + i * cols(); }

    bool finite() const {
        for (Real v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <class Other>
    Tensor<Other> cast() const {
        Tensor<Other> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<Other>(data[i]);
        return out;
    }
};

template <class Real>
using NamedTensors = std::map<std::string, Tensor<Real>>;

// y += x, elementwise; shapes must match.
template <class Real>
void accumulate(Tensor<Real>& y, const Tensor<Real>& x) {
    for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += x.data[i];
}

template <class Real>
void accumulate(NamedTensors<Real>& into, const NamedTensors<Real>& from) {
    for (const auto& [name, t] : from) accumulate(into.at(name), t);
}

// Dot product with double accumulation; used for both training-time scoring
// and index search so the two agree exactly.
template <class Real>
double dot(const Real* a, const Real* b, int64_t n) {
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return s;
}

}  // namespace costa
