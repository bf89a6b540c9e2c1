#pragma once

#include <cstring>
#include <vector>

#include "utka/common.hpp"

namespace utka {

// Dense row-major matrix of doubles. Deliberately minimal: storage plus
// indexing, all arithmetic goes through the kernels module.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {
        if (r < 0 || c < 0) throw DimensionError("negative matrix dimension");
    }

    double* row(int i) { return a.data() + static_cast<size_t>(i) * cols; }
    const double* row(int i) const { return a.data() + static_cast<size_t>(i) * cols; }

    double& at(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
    double at(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }

    size_t size() const { return a.size(); }
    double* data() { return a.data(); }
    const double* data() const { return a.data(); }

    void zero() { std::memset(a.data(), 0, a.size() * sizeof(double)); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

using Vec = std::vector<double>;

}  // namespace utka
