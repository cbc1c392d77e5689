#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "stabilitybench/errors.hpp"

namespace sb {

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw ContractError("dot: length mismatch (" + std::to_string(a.size()) +
                            " vs " + std::to_string(b.size()) + ")");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) {
    double s = 0.0;
    for (double x : a) s += x * x;
    return std::sqrt(s);
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline void scale(std::span<double> x, double alpha) {
    for (double& v : x) v *= alpha;
}

// Cosine similarity with the zero-vector convention: any pair involving a
// zero vector scores 0 (uninformative, avoids NaN at exact minima).
inline double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

inline bool all_finite(std::span<const double> a) {
    for (double x : a)
        if (!std::isfinite(x)) return false;
    return true;
}

// y = M x for row-major M (rows x cols).
inline void matvec(std::span<const double> m, std::size_t rows, std::size_t cols,
                   std::span<const double> x, std::span<double> y) {
    if (m.size() != rows * cols || x.size() != cols || y.size() != rows)
        throw ContractError("matvec: dimension mismatch");
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        const double* row = m.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) s += row[c] * x[c];
        y[r] = s;
    }
}

inline std::vector<double> linspace(double lo, double hi, std::size_t n) {
    std::vector<double> v(n);
    if (n == 1) {
        v[0] = lo;
        return v;
    }
    for (std::size_t i = 0; i < n; ++i)
        v[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    return v;
}

}  // namespace sb
