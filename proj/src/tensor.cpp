#include "scaffold/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace scaffold {

void Tensor::reset(const std::vector<std::size_t>& s) {
    shape = s;
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    data.assign(n, 0.0);
}

void Tensor::zero() {
    std::fill(data.begin(), data.end(), 0.0);
}

void matmul(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
        double* crow = c + i * n;
        if (!accumulate) std::memset(crow, 0, n * sizeof(double));
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
        double* crow = c + i * n;
        if (!accumulate) std::memset(crow, 0, n * sizeof(double));
        for (std::size_t p = 0; p < k; ++p) {
            double av = a[p * m + i];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] = accumulate ? crow[j] + s : s;
        }
    }
}

void add_colsum(const double* a, double* c, std::size_t m, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        for (std::size_t j = 0; j < n; ++j) c[j] += arow[j];
    }
}

bool all_finite(const double* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(p[i])) return false;
    }
    return true;
}

}  // namespace scaffold
