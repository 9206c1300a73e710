// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include "qlfg/matrix.hpp"

namespace qlfg::kernels {

// Dot product with eight fixed lanes combined pairwise in a fixed order.
// Every kernel that reduces along a contiguous row goes through this.
template <typename T>
inline T dot(const T* a, const T* b, std::size_t k) {
    const std::size_t k8 = k - k % 8;
    T lane[8] = {};
    for (std::size_t p = 0; p < k8; p += 8) {
        for (std::size_t l = 0; l < 8; ++l) {
            lane[l] += a[p + l] * b[p + l];
        }
    }
    T acc = ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
    for (std::size_t p = k8; p < k; ++p) {
        acc += a[p] * b[p];
    }
    return acc;
}

// Dense products used by every layer. The OpenMP versions split work over
// output rows only; each output element is reduced in a fixed ascending order,
// so results are bit-identical to the serial reference for any thread count.
//
//   gemm_nt: C = A * B^T   (A n x k, B d x k)   -- linear layer forward
//   gemm_nn: C = A * B     (A n x k, B k x d)   -- input gradient
//   gemm_tn: C = A^T * B   (A n x k, B n x d)   -- weight gradient
//
// With accumulate = true the product is added into C, which must already have
// the output shape.

template <typename T>
void gemm_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate = false);
template <typename T>
void gemm_nn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate = false);
template <typename T>
void gemm_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate = false);

template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
    Matrix<T> c;
    gemm_nt(a, b, c);
    return c;
}
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    Matrix<T> c;
    gemm_nn(a, b, c);
    return c;
}
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
    Matrix<T> c;
    gemm_tn(a, b, c);
    return c;
}

namespace serial {

template <typename T>
void gemm_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate = false);
template <typename T>
void gemm_nn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate = false);
template <typename T>
void gemm_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate = false);

}  // namespace serial

// Thread control. N = 1 reproduces multi-threaded output bit-exactly.
void set_num_threads(int n);
int num_threads();

}  // namespace qlfg::kernels
