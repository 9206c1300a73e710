// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "qlfg/kernels.hpp"

#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "qlfg/errors.hpp"

namespace qlfg::kernels {

namespace {

std::string shape_str(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
}

template <typename T>
void prepare(Matrix<T>& c, std::size_t rows, std::size_t cols, bool accumulate, const char* op) {
    if (accumulate) {
        if (c.rows() != rows || c.cols() != cols) {
            throw DimensionError(std::string(op) + ": accumulator is " + shape_str(c.rows(), c.cols()) +
                                 ", expected " + shape_str(rows, cols));
        }
    } else if (c.rows() != rows || c.cols() != cols) {
        c = Matrix<T>(rows, cols);
    } else {
        c.fill(T{});
    }
}

// Row kernels shared by the serial and OpenMP drivers so both perform the
// same floating-point operations in the same order.

template <typename T>
inline void row_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, std::size_t i) {
    const std::size_t k = a.cols();
    const T* ar = a.data() + i * k;
    T* cr = c.data() + i * c.cols();
    for (std::size_t j = 0; j < b.rows(); ++j) {
        const T acc = dot(ar, b.data() + j * k, k);
        cr[j] += acc;
    }
}

template <typename T>
inline void row_nn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, std::size_t i) {
    const std::size_t k = a.cols();
    const std::size_t d = b.cols();
    const T* ar = a.data() + i * k;
    T* cr = c.data() + i * d;
    for (std::size_t p = 0; p < k; ++p) {
        const T av = ar[p];
        const T* br = b.data() + p * d;
        for (std::size_t j = 0; j < d; ++j) {
            cr[j] += av * br[j];
        }
    }
}

// Row `p` of A^T B: sum_i A[i][p] * B[i][:].
template <typename T>
inline void row_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, std::size_t p) {
    const std::size_t d = b.cols();
    T* cr = c.data() + p * d;
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const T av = a(i, p);
        const T* br = b.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) {
            cr[j] += av * br[j];
        }
    }
}

template <typename T>
void check_nt(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols() != b.cols()) {
        throw DimensionError("gemm_nt: " + shape_str(a.rows(), a.cols()) + " * (" +
                             shape_str(b.rows(), b.cols()) + ")^T");
    }
}
template <typename T>
void check_nn(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("gemm_nn: " + shape_str(a.rows(), a.cols()) + " * " +
                             shape_str(b.rows(), b.cols()));
    }
}
template <typename T>
void check_tn(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.rows() != b.rows()) {
        throw DimensionError("gemm_tn: (" + shape_str(a.rows(), a.cols()) + ")^T * " +
                             shape_str(b.rows(), b.cols()));
    }
}

}  // namespace

template <typename T>
void gemm_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate) {
    check_nt(a, b);
    prepare(c, a.rows(), b.rows(), accumulate, "gemm_nt");
    const auto n = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static) if (n > 1)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        row_nt(a, b, c, static_cast<std::size_t>(i));
    }
}

template <typename T>
void gemm_nn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate) {
    check_nn(a, b);
    prepare(c, a.rows(), b.cols(), accumulate, "gemm_nn");
    const auto n = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static) if (n > 1)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        row_nn(a, b, c, static_cast<std::size_t>(i));
    }
}

template <typename T>
void gemm_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate) {
    check_tn(a, b);
    prepare(c, a.cols(), b.cols(), accumulate, "gemm_tn");
    const auto k = static_cast<std::ptrdiff_t>(a.cols());
#pragma omp parallel for schedule(static) if (k > 1)
    for (std::ptrdiff_t p = 0; p < k; ++p) {
        row_tn(a, b, c, static_cast<std::size_t>(p));
    }
}

namespace serial {

template <typename T>
void gemm_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate) {
    check_nt(a, b);
    prepare(c, a.rows(), b.rows(), accumulate, "gemm_nt");
    for (std::size_t i = 0; i < a.rows(); ++i) {
        row_nt(a, b, c, i);
    }
}

template <typename T>
void gemm_nn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate) {
    check_nn(a, b);
    prepare(c, a.rows(), b.cols(), accumulate, "gemm_nn");
    for (std::size_t i = 0; i < a.rows(); ++i) {
        row_nn(a, b, c, i);
    }
}

template <typename T>
void gemm_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate) {
    check_tn(a, b);
    prepare(c, a.cols(), b.cols(), accumulate, "gemm_tn");
    for (std::size_t p = 0; p < a.cols(); ++p) {
        row_tn(a, b, c, p);
    }
}

template void gemm_nt<float>(const MatrixF&, const MatrixF&, MatrixF&, bool);
template void gemm_nt<double>(const MatrixD&, const MatrixD&, MatrixD&, bool);
template void gemm_nn<float>(const MatrixF&, const MatrixF&, MatrixF&, bool);
template void gemm_nn<double>(const MatrixD&, const MatrixD&, MatrixD&, bool);
template void gemm_tn<float>(const MatrixF&, const MatrixF&, MatrixF&, bool);
template void gemm_tn<double>(const MatrixD&, const MatrixD&, MatrixD&, bool);

}  // namespace serial

template void gemm_nt<float>(const MatrixF&, const MatrixF&, MatrixF&, bool);
template void gemm_nt<double>(const MatrixD&, const MatrixD&, MatrixD&, bool);
template void gemm_nn<float>(const MatrixF&, const MatrixF&, MatrixF&, bool);
template void gemm_nn<double>(const MatrixD&, const MatrixD&, MatrixD&, bool);
template void gemm_tn<float>(const MatrixF&, const MatrixF&, MatrixF&, bool);
template void gemm_tn<double>(const MatrixD&, const MatrixD&, MatrixD&, bool);

void set_num_threads(int n) {
#ifdef _OPENMP
    if (n > 0) {
        omp_set_num_threads(n);
    }
#else
    (void)n;
#endif
}

int num_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace qlfg::kernels
