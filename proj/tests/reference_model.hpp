// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

// Straight-line fp64 forward of the decoder, written independently of the
// library's kernels. Used as an oracle for losses and finite differences.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "qlfg/model.hpp"

namespace qlfg::testing {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // rows

struct RefAdapter {
    Mat A;  // r x k
    Mat B;  // d x r
    double scale = 0.0;
};

struct RefLinear {
    Mat W;  // d_out x d_in
    bool has_adapter = false;
    RefAdapter ad;
};

struct RefModel {
    int n_heads = 0;
    bool gated = true;
    Mat embed;
    Mat lm_head;
    Vec final_norm;
    std::vector<Vec> attn_norm;
    std::vector<Vec> ffn_norm;
    std::vector<std::map<std::string, RefLinear>> layers;  // role -> linear
};

inline Mat to_mat(const MatrixF& m) {
    Mat out(m.rows(), Vec(m.cols()));
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            out[i][j] = m(i, j);
        }
    }
    return out;
}

inline RefLinear to_ref(const model::Linear& l) {
    RefLinear r;
    r.W = to_mat(l.weight);
    if (l.adapter) {
        r.has_adapter = true;
        r.ad.A = to_mat(l.adapter->A);
        r.ad.B = to_mat(l.adapter->B);
        r.ad.scale = static_cast<double>(l.adapter->alpha) / static_cast<double>(l.adapter->rank);
    }
    return r;
}

inline RefModel to_ref(const model::NanoTransformer& m) {
    RefModel r;
    r.n_heads = m.cfg.n_heads;
    r.gated = m.cfg.ffn_kind == model::FfnKind::gated_silu;
    r.embed = to_mat(m.embed);
    r.lm_head = to_mat(m.lm_head);
    r.final_norm.assign(m.final_norm.begin(), m.final_norm.end());
    for (const auto& L : m.layers) {
        r.attn_norm.emplace_back(L.attn_norm.begin(), L.attn_norm.end());
        r.ffn_norm.emplace_back(L.ffn_norm.begin(), L.ffn_norm.end());
        std::map<std::string, RefLinear> ls;
        ls["q"] = to_ref(L.q);
        ls["k"] = to_ref(L.k);
        ls["v"] = to_ref(L.v);
        ls["o"] = to_ref(L.o);
        if (r.gated) {
            ls["gate"] = to_ref(L.gate);
        }
        ls["up"] = to_ref(L.up);
        ls["down"] = to_ref(L.down);
        r.layers.push_back(std::move(ls));
    }
    return r;
}

inline Vec ref_apply(const RefLinear& l, const Vec& x) {
    Vec y(l.W.size(), 0.0);
    for (std::size_t i = 0; i < l.W.size(); ++i) {
        for (std::size_t j = 0; j < x.size(); ++j) {
            y[i] += l.W[i][j] * x[j];
        }
    }
    if (l.has_adapter) {
        Vec z(l.ad.A.size(), 0.0);
        for (std::size_t a = 0; a < z.size(); ++a) {
            for (std::size_t j = 0; j < x.size(); ++j) {
                z[a] += l.ad.A[a][j] * x[j];
            }
        }
        for (std::size_t i = 0; i < y.size(); ++i) {
            double s = 0.0;
            for (std::size_t a = 0; a < z.size(); ++a) {
                s += l.ad.B[i][a] * z[a];
            }
            y[i] += l.ad.scale * s;
        }
    }
    return y;
}

inline Vec rms(const Vec& x, const Vec& g) {
    double ss = 0.0;
    for (double v : x) {
        ss += v * v;
    }
    const double s = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-5);
    Vec out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * s * g[i];
    }
    return out;
}

// Rotates pairs (2i, 2i+1) of every head by p * 10000^(-2i/hd).
inline void rotate(Vec& x, std::size_t pos, int heads) {
    const std::size_t hd = x.size() / static_cast<std::size_t>(heads);
    for (int h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < hd / 2; ++i) {
            const double th = static_cast<double>(pos) * std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
            const std::size_t a = static_cast<std::size_t>(h) * hd + 2 * i;
            const double x0 = x[a];
            const double x1 = x[a + 1];
            x[a] = x0 * std::cos(th) - x1 * std::sin(th);
            x[a + 1] = x0 * std::sin(th) + x1 * std::cos(th);
        }
    }
}

// Logits for every position of one sequence.
inline Mat ref_logits(const RefModel& m, const std::vector<int>& tokens) {
    const std::size_t n = tokens.size();
    Mat x(n);
    for (std::size_t t = 0; t < n; ++t) {
        x[t] = m.embed[static_cast<std::size_t>(tokens[t])];
    }
    const std::size_t d = x[0].size();
    const std::size_t hd = d / static_cast<std::size_t>(m.n_heads);
    for (std::size_t li = 0; li < m.layers.size(); ++li) {
        const auto& L = m.layers[li];
        Mat q(n);
        Mat k(n);
        Mat v(n);
        for (std::size_t t = 0; t < n; ++t) {
            const Vec a = rms(x[t], m.attn_norm[li]);
            q[t] = ref_apply(L.at("q"), a);
            k[t] = ref_apply(L.at("k"), a);
            v[t] = ref_apply(L.at("v"), a);
            rotate(q[t], t, m.n_heads);
            rotate(k[t], t, m.n_heads);
        }
        Mat att(n, Vec(d, 0.0));
        for (int h = 0; h < m.n_heads; ++h) {
            const std::size_t c0 = static_cast<std::size_t>(h) * hd;
            for (std::size_t i = 0; i < n; ++i) {
                Vec s(i + 1);
                double mx = -INFINITY;
                for (std::size_t j = 0; j <= i; ++j) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < hd; ++c) {
                        acc += q[i][c0 + c] * k[j][c0 + c];
                    }
                    s[j] = acc / std::sqrt(static_cast<double>(hd));
                    mx = std::max(mx, s[j]);
                }
                double z = 0.0;
                for (auto& e : s) {
                    e = std::exp(e - mx);
                    z += e;
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    for (std::size_t c = 0; c < hd; ++c) {
                        att[i][c0 + c] += s[j] / z * v[j][c0 + c];
                    }
                }
            }
        }
        for (std::size_t t = 0; t < n; ++t) {
            const Vec o = ref_apply(L.at("o"), att[t]);
            for (std::size_t c = 0; c < d; ++c) {
                x[t][c] += o[c];
            }
            const Vec f = rms(x[t], m.ffn_norm[li]);
            Vec hmid;
            if (m.gated) {
                const Vec g = ref_apply(L.at("gate"), f);
                const Vec u = ref_apply(L.at("up"), f);
                hmid.resize(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) {
                    hmid[i] = g[i] / (1.0 + std::exp(-g[i])) * u[i];
                }
            } else {
                const Vec u = ref_apply(L.at("up"), f);
                hmid.resize(u.size());
                for (std::size_t i = 0; i < u.size(); ++i) {
                    hmid[i] = 0.5 * u[i] * (1.0 + std::erf(u[i] / std::sqrt(2.0)));
                }
            }
            const Vec dn = ref_apply(L.at("down"), hmid);
            for (std::size_t c = 0; c < d; ++c) {
                x[t][c] += dn[c];
            }
        }
    }
    Mat logits(n);
    for (std::size_t t = 0; t < n; ++t) {
        const Vec z = rms(x[t], m.final_norm);
        logits[t].assign(m.lm_head.size(), 0.0);
        for (std::size_t vtok = 0; vtok < m.lm_head.size(); ++vtok) {
            for (std::size_t c = 0; c < d; ++c) {
                logits[t][vtok] += m.lm_head[vtok][c] * z[c];
            }
        }
    }
    return logits;
}

// Mean NLL over targets (mask[t] = 1 for t >= 1) across all sequences.
inline double ref_loss(const RefModel& m, const std::vector<model::Sequence>& batch) {
    double nll = 0.0;
    std::size_t count = 0;
    for (const auto& s : batch) {
        const Mat lg = ref_logits(m, s.tokens);
        for (std::size_t t = 1; t < s.tokens.size(); ++t) {
            if (s.mask[t] == 0) {
                continue;
            }
            const Vec& row = lg[t - 1];
            double mx = row[0];
            for (double v : row) {
                mx = std::max(mx, v);
            }
            double z = 0.0;
            for (double v : row) {
                z += std::exp(v - mx);
            }
            nll += mx + std::log(z) - row[static_cast<std::size_t>(s.tokens[t])];
            ++count;
        }
    }
    return count == 0 ? 0.0 : nll / static_cast<double>(count);
}

}  // namespace qlfg::testing
