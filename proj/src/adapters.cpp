// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "qlfg/adapters.hpp"

#include <cmath>

#include "qlfg/errors.hpp"
#include "qlfg/kernels.hpp"
#include "qlfg/rng.hpp"

namespace qlfg::lora {

namespace {

void require(bool ok, const std::string& what) {
    if (!ok) {
        throw DimensionError(what);
    }
}

}  // namespace

std::string to_string(TargetSelector s) {
    switch (s) {
        case TargetSelector::key_query: return "key_query";
        case TargetSelector::all_attention: return "all_attention";
        case TargetSelector::all_ffn: return "all_ffn";
        case TargetSelector::all_layers: return "all_layers";
        case TargetSelector::attention_plus_ffn_output: return "attention_plus_ffn_output";
    }
    return "?";
}

TargetSelector parse_target_selector(std::string_view s) {
    for (auto sel : all_selectors()) {
        if (s == to_string(sel)) {
            return sel;
        }
    }
    throw ConfigError("unknown LoRA target set '" + std::string(s) +
                      "' (expected key_query, all_attention, all_ffn, all_layers or attention_plus_ffn_output)");
}

const std::vector<TargetSelector>& all_selectors() {
    static const std::vector<TargetSelector> all = {
        TargetSelector::key_query, TargetSelector::all_attention, TargetSelector::all_ffn,
        TargetSelector::all_layers, TargetSelector::attention_plus_ffn_output};
    return all;
}

std::string_view matrix_role(std::string_view name) {
    if (!name.starts_with("layer")) {
        return {};
    }
    const auto dot = name.find('.');
    if (dot == std::string_view::npos) {
        return {};
    }
    return name.substr(dot + 1);
}

bool selector_matches(TargetSelector s, std::string_view name) {
    const std::string_view role = matrix_role(name);
    const bool attn = role == "attn.q" || role == "attn.k" || role == "attn.v" || role == "attn.o";
    const bool ffn = role == "ffn.gate" || role == "ffn.up" || role == "ffn.down" || role == "ffn.in" ||
                     role == "ffn.out";
    switch (s) {
        case TargetSelector::key_query: return role == "attn.q" || role == "attn.k";
        case TargetSelector::all_attention: return attn;
        case TargetSelector::all_ffn: return ffn;
        case TargetSelector::all_layers: return attn || ffn;
        case TargetSelector::attention_plus_ffn_output:
            return role == "attn.o" || role == "ffn.down" || role == "ffn.out";
    }
    return false;
}

TargetSet TargetSet::resolve(TargetSelector selector, const std::vector<std::string>& matrix_names) {
    TargetSet ts;
    ts.selector = selector;
    for (const auto& n : matrix_names) {
        if (selector_matches(selector, n)) {
            ts.resolved.push_back(n);
        }
    }
    return ts;
}

template <typename T>
LoRAAdapterT<T> init_adapter(std::size_t d, std::size_t k, int r, T alpha, T dropout_p, std::uint64_t seed,
                             std::string target_name) {
    if (r < 1 || static_cast<std::size_t>(r) > std::min(d, k)) {
        throw ConfigError("LoRA rank " + std::to_string(r) + " outside [1, min(" + std::to_string(d) + ", " +
                          std::to_string(k) + ")]");
    }
    if (!(alpha > T{0})) {
        throw ConfigError("LoRA alpha must be positive");
    }
    if (!(dropout_p >= T{0} && dropout_p < T{1})) {
        throw ConfigError("LoRA dropout must lie in [0, 1)");
    }
    LoRAAdapterT<T> ad;
    ad.rank = r;
    ad.alpha = alpha;
    ad.dropout_p = dropout_p;
    ad.target_name = std::move(target_name);
    ad.A = Matrix<T>(static_cast<std::size_t>(r), k);
    ad.B = Matrix<T>(d, static_cast<std::size_t>(r));
    Rng rng(seed);
    const double sd = 1.0 / std::sqrt(static_cast<double>(r));
    for (auto& v : ad.A.flat()) {
        v = static_cast<T>(rng.normal() * sd);
    }
    return ad;
}

template <typename T>
Matrix<T> dropout_mask(std::size_t n, std::size_t k, T p, std::uint64_t seed) {
    Matrix<T> m(n, k, T{1});
    if (p <= T{0}) {
        return m;
    }
    Rng rng(seed);
    const T keep = T{1} / (T{1} - p);
    for (auto& v : m.flat()) {
        v = rng.uniform() < static_cast<double>(p) ? T{0} : keep;
    }
    return m;
}

template <typename T>
Matrix<T> adapter_delta(const Matrix<T>& x_eff, const LoRAAdapterT<T>& ad, Matrix<T>* z_out) {
    require(x_eff.cols() == ad.k(), "adapter: input has " + std::to_string(x_eff.cols()) + " columns, adapter expects " +
                                        std::to_string(ad.k()));
    Matrix<T> z = kernels::matmul_nt(x_eff, ad.A);
    Matrix<T> y = kernels::matmul_nt(z, ad.B);
    const T s = ad.scale();
    for (auto& v : y.flat()) {
        v *= s;
    }
    if (z_out != nullptr) {
        *z_out = std::move(z);
    }
    return y;
}

namespace {

template <typename T>
Matrix<T> masked(const Matrix<T>& x, const Matrix<T>& mask) {
    Matrix<T> out = x;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] *= mask.data()[i];
    }
    return out;
}

template <typename T>
void add_adapter_path(const Matrix<T>& x, const LoRAAdapterT<T>& ad, bool training, std::uint64_t seed,
                      Matrix<T>& y) {
    Matrix<T> delta;
    if (training && ad.dropout_p > T{0}) {
        delta = adapter_delta(masked(x, dropout_mask<T>(x.rows(), x.cols(), ad.dropout_p, seed)), ad);
    } else {
        delta = adapter_delta(x, ad);
    }
    for (std::size_t i = 0; i < y.size(); ++i) {
        y.data()[i] += delta.data()[i];
    }
}

}  // namespace

template <typename T>
Matrix<T> adapter_forward(const Matrix<T>& x, const Matrix<T>& base, const LoRAAdapterT<T>& ad, bool training,
                          std::uint64_t seed) {
    require(base.rows() == ad.d() && base.cols() == ad.k(), "adapter_forward: base is " +
                                                                 std::to_string(base.rows()) + "x" +
                                                                 std::to_string(base.cols()) + ", adapter is " +
                                                                 std::to_string(ad.d()) + "x" + std::to_string(ad.k()));
    require(x.cols() == base.cols(), "adapter_forward: input width does not match base");
    Matrix<T> y = kernels::matmul_nt(x, base);
    add_adapter_path(x, ad, training, seed, y);
    return y;
}

MatrixF adapter_forward(const MatrixF& x, const quant::QuantizedTensor& base, const LoRAAdapter& ad, bool training,
                        std::uint64_t seed, const quant::PrecisionPolicy& policy) {
    require(base.rows() == ad.d() && base.cols() == ad.k(), "adapter_forward: quantized base does not match adapter");
    MatrixF y = quant::quantized_linear(x, base, policy);
    add_adapter_path(x, ad, training, seed, y);
    return y;
}

template <typename T>
AdapterGrads<T> adapter_grads(const Matrix<T>& x, const Matrix<T>& upstream, const LoRAAdapterT<T>& ad,
                              const Matrix<T>* mask) {
    require(x.cols() == ad.k(), "adapter_grads: input width does not match adapter");
    require(upstream.cols() == ad.d() && upstream.rows() == x.rows(), "adapter_grads: upstream gradient shape mismatch");
    if (mask != nullptr) {
        require(mask->same_shape(x), "adapter_grads: dropout mask shape mismatch");
    }
    const Matrix<T> x_eff = mask != nullptr ? masked(x, *mask) : x;
    const T s = ad.scale();
    // y = s * z B^T with z = x_eff A^T.
    Matrix<T> z = kernels::matmul_nt(x_eff, ad.A);
    AdapterGrads<T> g;
    g.B = kernels::matmul_tn(upstream, z);  // d x r
    Matrix<T> dz = kernels::matmul(upstream, ad.B);  // n x r
    for (auto& v : g.B.flat()) {
        v *= s;
    }
    for (auto& v : dz.flat()) {
        v *= s;
    }
    g.A = kernels::matmul_tn(dz, x_eff);  // r x k
    return g;
}

template <typename T>
void adapter_input_grad(const Matrix<T>& upstream, const LoRAAdapterT<T>& ad, Matrix<T>& dx_eff) {
    Matrix<T> dz = kernels::matmul(upstream, ad.B);
    const T s = ad.scale();
    for (auto& v : dz.flat()) {
        v *= s;
    }
    kernels::gemm_nn(dz, ad.A, dx_eff, true);
}

template <typename T>
Matrix<T> merge(const LoRAAdapterT<T>& ad, const Matrix<T>& base) {
    require(base.rows() == ad.d() && base.cols() == ad.k(), "merge: base shape does not match adapter");
    Matrix<T> ba = kernels::matmul(ad.B, ad.A);
    Matrix<T> out = base;
    const T s = ad.scale();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] += s * ba.data()[i];
    }
    return out;
}

TrainableCount count_trainable(const std::vector<MatrixDims>& dims, TargetSelector targets, int r) {
    if (r < 1) {
        throw ConfigError("LoRA rank must be >= 1");
    }
    TrainableCount tc;
    bool any = false;
    for (const auto& m : dims) {
        tc.total_base += m.d * m.k;
        if (selector_matches(targets, m.name)) {
            tc.params += static_cast<std::uint64_t>(r) * (m.d + m.k);
            any = true;
        }
    }
    if (!any) {
        throw ConfigError("target set '" + to_string(targets) + "' matches no matrix in the model");
    }
    tc.fraction = static_cast<double>(tc.params) / static_cast<double>(tc.total_base);
    return tc;
}

std::vector<MatrixDims> llama2_70b_dims() {
    constexpr std::uint64_t hidden = 8192;
    constexpr std::uint64_t ffn = 28672;
    constexpr std::uint64_t kv = 1024;
    constexpr std::uint64_t vocab = 32000;
    std::vector<MatrixDims> dims;
    dims.push_back({"embed", vocab, hidden});
    for (int l = 0; l < 80; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        dims.push_back({p + "attn_norm", 1, hidden});
        dims.push_back({p + "attn.q", hidden, hidden});
        dims.push_back({p + "attn.k", kv, hidden});
        dims.push_back({p + "attn.v", kv, hidden});
        dims.push_back({p + "attn.o", hidden, hidden});
        dims.push_back({p + "ffn_norm", 1, hidden});
        dims.push_back({p + "ffn.gate", ffn, hidden});
        dims.push_back({p + "ffn.up", ffn, hidden});
        dims.push_back({p + "ffn.down", hidden, ffn});
    }
    dims.push_back({"final_norm", 1, hidden});
    dims.push_back({"lm_head", vocab, hidden});
    return dims;
}

#define QLFG_INSTANTIATE(T)                                                                                       \
    template LoRAAdapterT<T> init_adapter<T>(std::size_t, std::size_t, int, T, T, std::uint64_t, std::string);   \
    template Matrix<T> dropout_mask<T>(std::size_t, std::size_t, T, std::uint64_t);                              \
    template Matrix<T> adapter_delta<T>(const Matrix<T>&, const LoRAAdapterT<T>&, Matrix<T>*);                   \
    template Matrix<T> adapter_forward<T>(const Matrix<T>&, const Matrix<T>&, const LoRAAdapterT<T>&, bool,      \
                                          std::uint64_t);                                                         \
    template AdapterGrads<T> adapter_grads<T>(const Matrix<T>&, const Matrix<T>&, const LoRAAdapterT<T>&,        \
                                              const Matrix<T>*);                                                  \
    template void adapter_input_grad<T>(const Matrix<T>&, const LoRAAdapterT<T>&, Matrix<T>&);                  \
    template Matrix<T> merge<T>(const LoRAAdapterT<T>&, const Matrix<T>&);

QLFG_INSTANTIATE(float)
QLFG_INSTANTIATE(double)

#undef QLFG_INSTANTIATE

}  // namespace qlfg::lora
