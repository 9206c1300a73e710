// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "qlfg/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "qlfg/errors.hpp"
#include "qlfg/kernels.hpp"

namespace qlfg::attn {

std::string to_string(Kernel k) { return k == Kernel::naive ? "naive" : "streaming"; }

Kernel parse_kernel(std::string_view s) {
    if (s == "naive") {
        return Kernel::naive;
    }
    if (s == "streaming") {
        return Kernel::streaming;
    }
    throw ConfigError("unknown attention kernel '" + std::string(s) + "' (expected naive or streaming)");
}

namespace {

template <typename T>
void check_shapes(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v) {
    if (!q.same_shape(k) || !q.same_shape(v) || q.rows() == 0 || q.cols() == 0) {
        throw DimensionError("attention: Q " + std::to_string(q.rows()) + "x" + std::to_string(q.cols()) + ", K " +
                             std::to_string(k.rows()) + "x" + std::to_string(k.cols()) + ", V " +
                             std::to_string(v.rows()) + "x" + std::to_string(v.cols()));
    }
}

template <typename T>
T resolve_scale(T scale, std::size_t head_dim) {
    return scale > T{0} ? scale : T{1} / std::sqrt(static_cast<T>(head_dim));
}

}  // namespace

template <typename T>
Matrix<T> attention_naive(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, bool causal, T scale,
                          Matrix<T>* probs) {
    check_shapes(q, k, v);
    const std::size_t n = q.rows();
    const std::size_t hd = q.cols();
    scale = resolve_scale(scale, hd);
    Matrix<T> p(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        T* row = &p(i, 0);
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = (causal && j > i) ? static_cast<T>(kMaskValue) : scale * kernels::dot(&q(i, 0), &k(j, 0), hd);
            mx = std::max(mx, row[j]);
        }
        T sum = T{0};
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            row[j] /= sum;
        }
    }
    Matrix<T> out = kernels::matmul(p, v);
    if (probs != nullptr) {
        *probs = std::move(p);
    }
    return out;
}

template <typename T>
Matrix<T> attention_streaming(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, bool causal, T scale,
                              std::size_t tile_size, std::vector<T>* lse) {
    check_shapes(q, k, v);
    if (tile_size < 1) {
        throw ConfigError("attention: tile_size must be >= 1");
    }
    const std::size_t n = q.rows();
    const std::size_t hd = q.cols();
    scale = resolve_scale(scale, hd);
    const std::size_t tile = std::min(tile_size, n);

    Matrix<T> s(n, tile);  // the one live score block
    std::vector<T> m(n, -std::numeric_limits<T>::infinity());
    std::vector<T> l(n, T{0});
    Matrix<T> acc(n, hd);

    for (std::size_t j0 = 0; j0 < n; j0 += tile) {
        const std::size_t jn = std::min(tile, n - j0);
        for (std::size_t i = 0; i < n; ++i) {
            if (causal && j0 > i) {
                continue;
            }
            const std::size_t cols = causal ? std::min(jn, i - j0 + 1) : jn;
            T* srow = &s(i, 0);
            T tile_max = -std::numeric_limits<T>::infinity();
            for (std::size_t c = 0; c < cols; ++c) {
                srow[c] = scale * kernels::dot(&q(i, 0), &k(j0 + c, 0), hd);
                tile_max = std::max(tile_max, srow[c]);
            }
            const T m_new = std::max(m[i], tile_max);
            const T correction = std::exp(m[i] - m_new);
            T* a = &acc(i, 0);
            for (std::size_t d = 0; d < hd; ++d) {
                a[d] *= correction;
            }
            T tile_sum = T{0};
            for (std::size_t c = 0; c < cols; ++c) {
                const T pc = std::exp(srow[c] - m_new);
                tile_sum += pc;
                const T* vr = &v(j0 + c, 0);
                for (std::size_t d = 0; d < hd; ++d) {
                    a[d] += pc * vr[d];
                }
            }
            l[i] = l[i] * correction + tile_sum;
            m[i] = m_new;
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        const T inv = T{1} / l[i];
        for (std::size_t d = 0; d < hd; ++d) {
            acc(i, d) *= inv;
        }
    }
    if (lse != nullptr) {
        lse->resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            (*lse)[i] = m[i] + std::log(l[i]);
        }
    }
    return acc;
}

template <typename T>
Matrix<T> attention_naive(const AttentionInputs<T>& in) {
    return attention_naive(*in.Q, *in.K, *in.V, in.causal, in.scale);
}

template <typename T>
Matrix<T> attention_streaming(const AttentionInputs<T>& in) {
    return attention_streaming(*in.Q, *in.K, *in.V, in.causal, in.scale, in.tile_size);
}

template <typename T>
void attention_naive_backward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, const Matrix<T>& probs,
                              const Matrix<T>& d_out, T scale, Matrix<T>& dq, Matrix<T>& dk, Matrix<T>& dv) {
    check_shapes(q, k, v);
    const std::size_t n = q.rows();
    scale = resolve_scale(scale, q.cols());
    if (probs.rows() != n || probs.cols() != n || !d_out.same_shape(q)) {
        throw DimensionError("attention backward: weight or gradient shape mismatch");
    }
    dv = kernels::matmul_tn(probs, d_out);
    Matrix<T> ds = kernels::matmul_nt(d_out, v);  // dP
    for (std::size_t i = 0; i < n; ++i) {
        T* r = &ds(i, 0);
        const T* p = &probs(i, 0);
        const T dsum = kernels::dot(r, p, n);
        for (std::size_t j = 0; j < n; ++j) {
            r[j] = p[j] * (r[j] - dsum) * scale;
        }
    }
    dq = kernels::matmul(ds, k);
    dk = kernels::matmul_tn(ds, q);
}

template <typename T>
void attention_streaming_backward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, const Matrix<T>& out,
                                  const std::vector<T>& lse, const Matrix<T>& d_out, bool causal, T scale,
                                  std::size_t tile_size, Matrix<T>& dq, Matrix<T>& dk, Matrix<T>& dv) {
    check_shapes(q, k, v);
    if (tile_size < 1) {
        throw ConfigError("attention: tile_size must be >= 1");
    }
    const std::size_t n = q.rows();
    const std::size_t hd = q.cols();
    scale = resolve_scale(scale, hd);
    if (!out.same_shape(q) || !d_out.same_shape(q) || lse.size() != n) {
        throw DimensionError("attention backward: output or gradient shape mismatch");
    }
    const std::size_t tile = std::min(tile_size, n);
    std::vector<T> delta(n);
    for (std::size_t i = 0; i < n; ++i) {
        delta[i] = kernels::dot(&d_out(i, 0), &out(i, 0), hd);
    }
    dq = Matrix<T>(n, hd);
    dk = Matrix<T>(n, hd);
    dv = Matrix<T>(n, hd);
    for (std::size_t j0 = 0; j0 < n; j0 += tile) {
        const std::size_t jn = std::min(tile, n - j0);
        for (std::size_t i = 0; i < n; ++i) {
            if (causal && j0 > i) {
                continue;
            }
            const std::size_t cols = causal ? std::min(jn, i - j0 + 1) : jn;
            const T* qi = &q(i, 0);
            const T* doi = &d_out(i, 0);
            T* dqi = &dq(i, 0);
            for (std::size_t c = 0; c < cols; ++c) {
                const std::size_t j = j0 + c;
                const T p = std::exp(scale * kernels::dot(qi, &k(j, 0), hd) - lse[i]);
                const T dp = kernels::dot(doi, &v(j, 0), hd);
                const T ds = p * (dp - delta[i]) * scale;
                T* dvj = &dv(j, 0);
                T* dkj = &dk(j, 0);
                const T* kj = &k(j, 0);
                for (std::size_t d = 0; d < hd; ++d) {
                    dvj[d] += p * doi[d];
                    dqi[d] += ds * kj[d];
                    dkj[d] += ds * qi[d];
                }
            }
        }
    }
}

std::uint64_t attention_workspace_bytes(std::uint64_t seq, std::uint64_t head_dim, std::uint64_t tile_size,
                                        Kernel kernel) {
    if (kernel == Kernel::naive) {
        return seq * seq * 4;
    }
    const std::uint64_t tile = std::min(tile_size, seq);
    return seq * tile * 4 + 3 * seq * 4 + seq * head_dim * 4;
}

#define QLFG_INSTANTIATE(T)                                                                                        \
    template Matrix<T> attention_naive<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&, bool, T,           \
                                          Matrix<T>*);                                                              \
    template Matrix<T> attention_streaming<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&, bool, T,       \
                                              std::size_t, std::vector<T>*);                                        \
    template Matrix<T> attention_naive<T>(const AttentionInputs<T>&);                                               \
    template Matrix<T> attention_streaming<T>(const AttentionInputs<T>&);                                           \
    template void attention_naive_backward<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&,                \
                                              const Matrix<T>&, const Matrix<T>&, T, Matrix<T>&, Matrix<T>&,       \
                                              Matrix<T>&);                                                          \
    template void attention_streaming_backward<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&,            \
                                                  const Matrix<T>&, const std::vector<T>&, const Matrix<T>&, bool, \
                                                  T, std::size_t, Matrix<T>&, Matrix<T>&, Matrix<T>&);

QLFG_INSTANTIATE(float)
QLFG_INSTANTIATE(double)

#undef QLFG_INSTANTIATE

}  // namespace qlfg::attn
