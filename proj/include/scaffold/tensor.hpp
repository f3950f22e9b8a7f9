#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

namespace scaffold {

// Dense row-major double tensor. Model math runs entirely in double so the
// finite-difference gradient checks are meaningful.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::initializer_list<std::size_t> s) { reset(s); }

    void reset(const std::vector<std::size_t>& s);
    void reset(std::initializer_list<std::size_t> s) {
        reset(std::vector<std::size_t>(s));
    }

    std::size_t numel() const noexcept { return data.size(); }
    bool empty() const noexcept { return data.empty(); }
    void zero();

    double* ptr() noexcept { return data.data(); }
    const double* ptr() const noexcept { return data.data(); }

    double& operator[](std::size_t i) noexcept { return data[i]; }
    double operator[](std::size_t i) const noexcept { return data[i]; }
};

// c[M,N] = a[M,K] * b[K,N], optionally accumulating into c.
// Each output element is a sequential reduction, so results do not depend
// on thread count.
void matmul(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate = false);

// c[M,N] = a[K,M]^T * b[K,N]
void matmul_tn(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate = false);

// c[M,N] = a[M,K] * b[N,K]^T
void matmul_nt(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate = false);

// c[N] += column sums of a[M,N]
void add_colsum(const double* a, double* c, std::size_t m, std::size_t n);

bool all_finite(const double* p, std::size_t n);

}  // namespace scaffold
