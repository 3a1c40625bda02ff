#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mstts {

/// Dense row-major matrix. Row vectors are (1, n), columns (n, 1).
template <typename T>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    Mat() = default;
    Mat(int r, int c, T fill = T(0))
        : rows(r), cols(c), data(static_cast<size_t>(r) * static_cast<size_t>(c), fill) {
        if (r < 0 || c < 0) throw std::invalid_argument("Mat: negative dimension");
    }

    static Mat row_vector(std::vector<T> values) {
        Mat m;
        m.rows = 1;
        m.cols = static_cast<int>(values.size());
        m.data = std::move(values);
        return m;
    }

    T &operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    const T &operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    T *row_ptr(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const T *row_ptr(int r) const { return data.data() + static_cast<size_t>(r) * cols; }

    size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    bool same_shape(const Mat &o) const { return rows == o.rows && cols == o.cols; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    Mat<U> cast() const {
        Mat<U> out(rows, cols);
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

template <typename T>
inline double max_abs_diff(const Mat<T> &a, const Mat<T> &b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]));
        if (d > m) m = d;
    }
    return m;
}

template <typename T>
inline double max_abs_diff(const std::vector<T> &a, const std::vector<T> &b) {
    if (a.size() != b.size()) throw std::invalid_argument("max_abs_diff: length mismatch");
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
        if (d > m) m = d;
    }
    return m;
}

}  // namespace mstts
