#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "pd/common.hpp"

namespace pd {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

// Dense row-major tensor.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)) {
        data.assign(std::size_t(shape_numel(shape)), T(0));
    }
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (std::int64_t(data.size()) != shape_numel(shape))
            throw ShapeError("tensor data length does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T v) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = v;
        return t;
    }
    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    std::int64_t numel() const { return std::int64_t(data.size()); }
    int rank() const { return int(shape.size()); }
    int dim(int i) const { return shape[std::size_t(i)]; }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
        return out;
    }
};

template <typename T>
inline bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape;
}

template <typename T>
inline void require_shape(const Tensor<T>& t, const Shape& s, const char* what) {
    if (t.shape != s)
        throw ShapeError(std::string(what) + ": expected " + shape_str(s) + ", got " +
                         shape_str(t.shape));
}

}  // namespace pd
