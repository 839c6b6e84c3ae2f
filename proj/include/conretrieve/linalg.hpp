#pragma once

#include <cstddef>
#include <vector>

namespace conretrieve {

// Dense row-major matrix of doubles. All model math happens in double; tensors
// are quantized to f32 only at the serialization boundary.
struct Mat {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(size_t r, size_t c) { return data[r * cols + c]; }
    double at(size_t r, size_t c) const { return data[r * cols + c]; }

    double* row(size_t r) { return data.data() + r * cols; }
    const double* row(size_t r) const { return data.data() + r * cols; }

    size_t size() const { return data.size(); }

    void fill(double v) {
        for (double& x : data) x = v;
    }
};

inline Mat zeros_like(const Mat& m) { return Mat(m.rows, m.cols); }

inline double dot(const double* a, const double* b, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

}  // namespace conretrieve
