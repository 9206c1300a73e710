// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "qlfg/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>

#include "qlfg/errors.hpp"
#include "qlfg/kernels.hpp"
#include "qlfg/rng.hpp"

namespace qlfg::model {

namespace {

constexpr float kNormEps = 1e-5f;
constexpr double kRopeBase = 10000.0;

std::string fmt_float(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

const std::string& meta_get(const std::map<std::string, std::string>& meta, const std::string& key) {
    auto it = meta.find(key);
    if (it == meta.end()) {
        throw DataError("checkpoint metadata missing '" + key + "'");
    }
    return it->second;
}

long long parse_int(const std::string& key, const std::string& s) {
    long long v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
        throw DataError("metadata '" + key + "' is not an integer: '" + s + "'");
    }
    return v;
}

double parse_real(const std::string& key, const std::string& s) {
    double v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
        throw DataError("metadata '" + key + "' is not a number: '" + s + "'");
    }
    return v;
}

}  // namespace

std::string to_string(FfnKind k) { return k == FfnKind::gated_silu ? "gated_silu" : "plain_gelu"; }

FfnKind parse_ffn_kind(std::string_view s) {
    if (s == "gated_silu") {
        return FfnKind::gated_silu;
    }
    if (s == "plain_gelu") {
        return FfnKind::plain_gelu;
    }
    throw ConfigError("unknown ffn kind '" + std::string(s) + "' (expected gated_silu or plain_gelu)");
}

void NanoTransformerConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v < 1) {
            throw ConfigError(std::string("model.") + name + " must be >= 1, got " + std::to_string(v));
        }
    };
    positive(n_layers, "n_layers");
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(d_ffn, "d_ffn");
    positive(vocab_size, "vocab_size");
    positive(max_seq, "max_seq");
    if (d_model % n_heads != 0) {
        throw ConfigError("model.d_model (" + std::to_string(d_model) + ") is not divisible by model.n_heads (" +
                          std::to_string(n_heads) + ")");
    }
    if (head_dim() % 2 != 0) {
        throw ConfigError("head dimension must be even for rotary embeddings");
    }
    if (vocab_size < ByteTokenizer::kVocabSize) {
        throw ConfigError("model.vocab_size must be at least " + std::to_string(ByteTokenizer::kVocabSize));
    }
    if (tile_size < 1) {
        throw ConfigError("attention.tile_size must be >= 1");
    }
}

std::map<std::string, std::string> NanoTransformerConfig::to_metadata() const {
    return {
        {"model.n_layers", std::to_string(n_layers)},
        {"model.d_model", std::to_string(d_model)},
        {"model.n_heads", std::to_string(n_heads)},
        {"model.d_ffn", std::to_string(d_ffn)},
        {"model.vocab_size", std::to_string(vocab_size)},
        {"model.max_seq", std::to_string(max_seq)},
        {"model.ffn_kind", to_string(ffn_kind)},
        {"attention.kernel", attn::to_string(kernel)},
        {"attention.tile_size", std::to_string(tile_size)},
    };
}

NanoTransformerConfig NanoTransformerConfig::from_metadata(const std::map<std::string, std::string>& meta) {
    NanoTransformerConfig c;
    auto geti = [&](const std::string& k) { return static_cast<int>(parse_int(k, meta_get(meta, k))); };
    c.n_layers = geti("model.n_layers");
    c.d_model = geti("model.d_model");
    c.n_heads = geti("model.n_heads");
    c.d_ffn = geti("model.d_ffn");
    c.vocab_size = geti("model.vocab_size");
    c.max_seq = geti("model.max_seq");
    c.ffn_kind = parse_ffn_kind(meta_get(meta, "model.ffn_kind"));
    c.kernel = attn::parse_kernel(meta_get(meta, "attention.kernel"));
    c.tile_size = static_cast<std::size_t>(geti("attention.tile_size"));
    c.validate();
    return c;
}

std::vector<Linear*> NanoTransformer::linears() {
    std::vector<Linear*> out;
    const bool gated = cfg.ffn_kind == FfnKind::gated_silu;
    for (auto& l : layers) {
        out.insert(out.end(), {&l.q, &l.k, &l.v, &l.o});
        if (gated) {
            out.push_back(&l.gate);
        }
        out.insert(out.end(), {&l.up, &l.down});
    }
    return out;
}

std::vector<const Linear*> NanoTransformer::linears() const {
    std::vector<const Linear*> out;
    for (Linear* p : const_cast<NanoTransformer*>(this)->linears()) {
        out.push_back(p);
    }
    return out;
}

std::vector<std::string> NanoTransformer::matrix_names() const {
    std::vector<std::string> names;
    for (const Linear* l : linears()) {
        names.push_back(l->name);
    }
    return names;
}

Linear& NanoTransformer::linear(const std::string& name) {
    for (Linear* l : linears()) {
        if (l->name == name) {
            return *l;
        }
    }
    throw ConfigError("model has no matrix named '" + name + "'");
}

const Linear& NanoTransformer::linear(const std::string& name) const {
    return const_cast<NanoTransformer*>(this)->linear(name);
}

std::vector<lora::MatrixDims> NanoTransformer::dims() const {
    std::vector<lora::MatrixDims> d;
    const auto dm = static_cast<std::uint64_t>(cfg.d_model);
    d.push_back({"embed", embed.rows(), embed.cols()});
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string p = "layer" + std::to_string(i) + ".";
        d.push_back({p + "attn_norm", 1, dm});
        d.push_back({p + "ffn_norm", 1, dm});
    }
    for (const Linear* l : linears()) {
        d.push_back({l->name, l->weight.rows(), l->weight.cols()});
    }
    d.push_back({"final_norm", 1, dm});
    d.push_back({"lm_head", lm_head.rows(), lm_head.cols()});
    return d;
}

std::uint64_t NanoTransformer::base_param_count() const {
    std::uint64_t n = 0;
    for (const auto& m : dims()) {
        n += m.d * m.k;
    }
    return n;
}

std::uint64_t NanoTransformer::adapter_param_count() const {
    std::uint64_t n = 0;
    for (const Linear* l : linears()) {
        if (l->adapter) {
            n += l->adapter->param_count();
        }
    }
    return n;
}

std::size_t NanoTransformer::adapter_count() const {
    std::size_t n = 0;
    for (const Linear* l : linears()) {
        n += l->adapter ? 1 : 0;
    }
    return n;
}

namespace {

void init_linear(Linear& l, std::string name, std::size_t d_out, std::size_t d_in, Rng& rng) {
    l.name = std::move(name);
    l.weight = MatrixF(d_out, d_in);
    const double sd = 1.0 / std::sqrt(static_cast<double>(d_in));
    for (auto& v : l.weight.flat()) {
        v = static_cast<float>(rng.normal() * sd);
    }
}

}  // namespace

NanoTransformer build_model(const NanoTransformerConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    NanoTransformer m;
    m.cfg = cfg;
    Rng rng(seed);
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto f = static_cast<std::size_t>(cfg.d_ffn);
    const auto v = static_cast<std::size_t>(cfg.vocab_size);
    m.embed = MatrixF(v, d);
    for (auto& x : m.embed.flat()) {
        x = static_cast<float>(rng.normal());
    }
    m.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        auto& L = m.layers[i];
        const std::string p = "layer" + std::to_string(i) + ".";
        L.attn_norm.assign(d, 1.0f);
        L.ffn_norm.assign(d, 1.0f);
        init_linear(L.q, p + "attn.q", d, d, rng);
        init_linear(L.k, p + "attn.k", d, d, rng);
        init_linear(L.v, p + "attn.v", d, d, rng);
        init_linear(L.o, p + "attn.o", d, d, rng);
        if (cfg.ffn_kind == FfnKind::gated_silu) {
            init_linear(L.gate, p + "ffn.gate", f, d, rng);
            init_linear(L.up, p + "ffn.up", f, d, rng);
            init_linear(L.down, p + "ffn.down", d, f, rng);
        } else {
            init_linear(L.up, p + "ffn.in", f, d, rng);
            init_linear(L.down, p + "ffn.out", d, f, rng);
        }
    }
    m.final_norm.assign(d, 1.0f);
    m.lm_head = MatrixF(v, d);
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto& x : m.lm_head.flat()) {
        x = static_cast<float>(rng.normal() * sd);
    }
    return m;
}

void freeze_and_quantize(NanoTransformer& m, const quant::PrecisionPolicy& policy, std::size_t block_size,
                         std::size_t superblock_size) {
    if (m.frozen) {
        return;
    }
    for (Linear* l : m.linears()) {
        l->quantized = quant::quantize_nf4(l->weight, block_size, superblock_size, policy);
        l->weight = quant::dequantize(*l->quantized, policy);
    }
    m.policy = policy;
    m.block_size = block_size;
    m.superblock_size = superblock_size;
    m.frozen = true;
}

void attach_adapters(NanoTransformer& m, lora::TargetSelector targets, int r, float alpha, float dropout,
                     std::uint64_t seed) {
    if (!m.frozen) {
        throw ConfigError("attach_adapters: model must be frozen first");
    }
    const auto ts = lora::TargetSet::resolve(targets, m.matrix_names());
    if (ts.resolved.empty()) {
        throw ConfigError("target set '" + lora::to_string(targets) + "' matches no matrix in the model");
    }
    for (Linear* l : m.linears()) {
        l->adapter.reset();
    }
    for (const auto& name : ts.resolved) {
        Linear& l = m.linear(name);
        l.adapter = lora::init_adapter<float>(l.weight.rows(), l.weight.cols(), r, alpha, dropout,
                                              derive_seed(seed, 0, 0, name), name);
    }
    m.adapters = AdapterSettings{targets, r, alpha, dropout};
}

std::uint64_t model_storage_bytes(const NanoTransformer& m) {
    std::uint64_t bytes = 0;
    for (const auto& d : m.dims()) {
        bool quantized = false;
        if (m.frozen && lora::matrix_role(d.name).find('.') != std::string_view::npos) {
            bytes += m.linear(d.name).quantized->payload_bytes();
            quantized = true;
        }
        if (!quantized) {
            bytes += d.d * d.k * 4;
        }
    }
    return bytes;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

struct Span {
    std::size_t off;
    std::size_t len;
};

struct LinCache {
    MatrixF mask;  // empty when dropout is inactive
    MatrixF z;     // x_eff A^T
};

struct LayerTape {
    MatrixF x_in;
    std::vector<float> inv1;
    MatrixF a;
    MatrixF q, k, v;  // q and k after rotation
    std::vector<MatrixF> probs;
    std::vector<std::vector<float>> lse;
    MatrixF attn;
    MatrixF x_mid;
    std::vector<float> inv2;
    MatrixF f;
    MatrixF g, u, h;
    LinCache cq, ck, cv, co, cg, cu, cd;
};

struct Tape {
    std::vector<Span> spans;
    std::vector<LayerTape> layers;
    MatrixF x_final;
    std::vector<float> inv_final;
};

void rmsnorm(const MatrixF& x, const std::vector<float>& gain, MatrixF& out, std::vector<float>& inv) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    out = MatrixF(n, d);
    inv.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const float* xr = &x(i, 0);
        const float ss = kernels::dot(xr, xr, d);
        const float s = 1.0f / std::sqrt(ss / static_cast<float>(d) + kNormEps);
        inv[i] = s;
        float* o = &out(i, 0);
        for (std::size_t j = 0; j < d; ++j) {
            o[j] = xr[j] * s * gain[j];
        }
    }
}

// Adds d(rmsnorm)/dx applied to dy into dx.
void rmsnorm_backward(const MatrixF& x, const std::vector<float>& inv, const std::vector<float>& gain,
                      const MatrixF& dy, MatrixF& dx) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    std::vector<float> gd(d);
    for (std::size_t i = 0; i < n; ++i) {
        const float* xr = &x(i, 0);
        const float* dyr = &dy(i, 0);
        for (std::size_t j = 0; j < d; ++j) {
            gd[j] = gain[j] * dyr[j];
        }
        const float s = inv[i];
        const float c = kernels::dot(gd.data(), xr, d) * s * s * s / static_cast<float>(d);
        float* o = &dx(i, 0);
        for (std::size_t j = 0; j < d; ++j) {
            o[j] += s * gd[j] - xr[j] * c;
        }
    }
}

struct RopeTable {
    std::size_t half = 0;
    std::vector<float> cos, sin;
};

RopeTable rope_table(std::size_t max_len, std::size_t head_dim) {
    RopeTable t;
    t.half = head_dim / 2;
    t.cos.resize(max_len * t.half);
    t.sin.resize(max_len * t.half);
    for (std::size_t p = 0; p < max_len; ++p) {
        for (std::size_t i = 0; i < t.half; ++i) {
            const double theta =
                static_cast<double>(p) * std::pow(kRopeBase, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
            t.cos[p * t.half + i] = static_cast<float>(std::cos(theta));
            t.sin[p * t.half + i] = static_cast<float>(std::sin(theta));
        }
    }
    return t;
}

void apply_rope(MatrixF& x, const std::vector<Span>& spans, int n_heads, const RopeTable& t, bool inverse) {
    const std::size_t hd = t.half * 2;
    for (const Span& s : spans) {
        for (std::size_t p = 0; p < s.len; ++p) {
            float* row = &x(s.off + p, 0);
            for (int h = 0; h < n_heads; ++h) {
                float* hr = row + static_cast<std::size_t>(h) * hd;
                for (std::size_t i = 0; i < t.half; ++i) {
                    const float c = t.cos[p * t.half + i];
                    const float sn = inverse ? -t.sin[p * t.half + i] : t.sin[p * t.half + i];
                    const float x0 = hr[2 * i];
                    const float x1 = hr[2 * i + 1];
                    hr[2 * i] = x0 * c - x1 * sn;
                    hr[2 * i + 1] = x0 * sn + x1 * c;
                }
            }
        }
    }
}

MatrixF slice(const MatrixF& x, const Span& s, std::size_t col0, std::size_t width) {
    MatrixF out(s.len, width);
    for (std::size_t r = 0; r < s.len; ++r) {
        std::copy_n(&x(s.off + r, col0), width, &out(r, 0));
    }
    return out;
}

void scatter(MatrixF& x, const Span& s, std::size_t col0, const MatrixF& part) {
    for (std::size_t r = 0; r < s.len; ++r) {
        std::copy_n(&part(r, 0), part.cols(), &x(s.off + r, col0));
    }
}

MatrixF masked(const MatrixF& x, const MatrixF& mask) {
    MatrixF out = x;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] *= mask.data()[i];
    }
    return out;
}

MatrixF lin_forward(const NanoTransformer& m, const Linear& l, const MatrixF& x, const ForwardOptions& opts,
                    LinCache* cache) {
    MatrixF y = kernels::matmul_nt(x, l.weight);
    if (l.adapter) {
        const auto& ad = *l.adapter;
        MatrixF mask;
        if (opts.training && ad.dropout_p > 0.0f) {
            mask = lora::dropout_mask<float>(x.rows(), x.cols(), ad.dropout_p,
                                             derive_seed(opts.seed, opts.step, opts.stream, l.name));
        }
        MatrixF z;
        const MatrixF delta = mask.empty() ? lora::adapter_delta(x, ad, &z) : lora::adapter_delta(masked(x, mask), ad, &z);
        for (std::size_t i = 0; i < y.size(); ++i) {
            y.data()[i] += delta.data()[i];
        }
        if (cache != nullptr) {
            cache->mask = std::move(mask);
            cache->z = std::move(z);
        }
    }
    if (m.policy.compute_width == quant::ComputeWidth::bf16) {
        quant::round_bf16_inplace(y.flat());
    }
    return y;
}

// dx (overwritten when need_dx) and adapter gradients from dy.
void lin_backward(const Linear& l, const MatrixF& x, const LinCache& cache, const MatrixF& dy, bool need_dx,
                  MatrixF& dx, AdapterGradMap& grads) {
    if (need_dx) {
        kernels::gemm_nn(dy, l.weight, dx);
    }
    if (!l.adapter) {
        return;
    }
    const auto& ad = *l.adapter;
    const float s = ad.scale();
    auto [it, inserted] = grads.try_emplace(l.name);
    auto& g = it->second;
    if (inserted) {
        g.A = MatrixF(ad.A.rows(), ad.A.cols());
        g.B = MatrixF(ad.B.rows(), ad.B.cols());
    }
    MatrixF gb = kernels::matmul_tn(dy, cache.z);
    for (std::size_t i = 0; i < gb.size(); ++i) {
        g.B.data()[i] += s * gb.data()[i];
    }
    MatrixF dz = kernels::matmul(dy, ad.B);
    for (auto& v : dz.flat()) {
        v *= s;
    }
    if (cache.mask.empty()) {
        kernels::gemm_tn(dz, x, g.A, true);
    } else {
        kernels::gemm_tn(dz, masked(x, cache.mask), g.A, true);
    }
    if (need_dx) {
        MatrixF dxe = kernels::matmul(dz, ad.A);
        if (!cache.mask.empty()) {
            for (std::size_t i = 0; i < dxe.size(); ++i) {
                dxe.data()[i] *= cache.mask.data()[i];
            }
        }
        for (std::size_t i = 0; i < dx.size(); ++i) {
            dx.data()[i] += dxe.data()[i];
        }
    }
}

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

inline float gelu(float x) { return 0.5f * x * (1.0f + std::erf(x * static_cast<float>(std::numbers::sqrt2 / 2))); }

inline float gelu_grad(float x) {
    const float cdf = 0.5f * (1.0f + std::erf(x * static_cast<float>(std::numbers::sqrt2 / 2)));
    const float pdf = std::exp(-0.5f * x * x) * static_cast<float>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
    return cdf + x * pdf;
}

std::vector<Span> make_spans(const NanoTransformer& m, const std::vector<Sequence>& batch) {
    std::vector<Span> spans;
    std::size_t off = 0;
    for (const auto& s : batch) {
        if (s.tokens.empty()) {
            throw DataError("forward: empty sequence");
        }
        if (s.tokens.size() > static_cast<std::size_t>(m.cfg.max_seq)) {
            throw DimensionError("forward: sequence length " + std::to_string(s.tokens.size()) + " exceeds max_seq " +
                                 std::to_string(m.cfg.max_seq));
        }
        if (!s.mask.empty() && s.mask.size() != s.tokens.size()) {
            throw DimensionError("forward: loss mask length differs from token count");
        }
        for (int t : s.tokens) {
            if (t < 0 || t >= m.cfg.vocab_size) {
                throw DataError("forward: token id " + std::to_string(t) + " outside vocabulary");
            }
        }
        spans.push_back({off, s.tokens.size()});
        off += s.tokens.size();
    }
    return spans;
}

// Runs the network on concatenated sequences and returns logits. With a tape,
// keeps what backward needs.
MatrixF run_forward(const NanoTransformer& m, const std::vector<Sequence>& batch, const ForwardOptions& opts,
                    Tape* tape) {
    const auto& cfg = m.cfg;
    const std::vector<Span> spans = make_spans(m, batch);
    const std::size_t n = spans.empty() ? 0 : spans.back().off + spans.back().len;
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t hd = static_cast<std::size_t>(cfg.head_dim());
    const int nh = cfg.n_heads;
    std::size_t max_len = 0;
    for (const auto& s : spans) {
        max_len = std::max(max_len, s.len);
    }
    const RopeTable rope = rope_table(max_len, hd);
    const bool naive = cfg.kernel == attn::Kernel::naive;

    MatrixF x(n, d);
    {
        std::size_t r = 0;
        for (const auto& s : batch) {
            for (int t : s.tokens) {
                std::copy_n(&m.embed(static_cast<std::size_t>(t), 0), d, &x(r++, 0));
            }
        }
    }
    if (tape != nullptr) {
        tape->spans = spans;
        tape->layers.resize(m.layers.size());
    }

    for (std::size_t li = 0; li < m.layers.size(); ++li) {
        const Layer& L = m.layers[li];
        LayerTape local;
        LayerTape& T = tape != nullptr ? tape->layers[li] : local;
        const bool keep = tape != nullptr;

        MatrixF a;
        rmsnorm(x, L.attn_norm, a, T.inv1);
        MatrixF q = lin_forward(m, L.q, a, opts, keep ? &T.cq : nullptr);
        MatrixF k = lin_forward(m, L.k, a, opts, keep ? &T.ck : nullptr);
        MatrixF v = lin_forward(m, L.v, a, opts, keep ? &T.cv : nullptr);
        apply_rope(q, spans, nh, rope, false);
        apply_rope(k, spans, nh, rope, false);

        MatrixF att(n, d);
        const std::size_t jobs = spans.size() * static_cast<std::size_t>(nh);
        if (keep) {
            if (naive) {
                T.probs.assign(jobs, MatrixF());
            } else {
                T.lse.assign(jobs, {});
            }
        }
#pragma omp parallel for schedule(static)
        for (std::size_t job = 0; job < jobs; ++job) {
            const Span& s = spans[job / static_cast<std::size_t>(nh)];
            const std::size_t c0 = (job % static_cast<std::size_t>(nh)) * hd;
            const MatrixF qh = slice(q, s, c0, hd);
            const MatrixF kh = slice(k, s, c0, hd);
            const MatrixF vh = slice(v, s, c0, hd);
            MatrixF oh;
            if (naive) {
                oh = attn::attention_naive(qh, kh, vh, true, 0.0f, keep ? &T.probs[job] : nullptr);
            } else {
                oh = attn::attention_streaming(qh, kh, vh, true, 0.0f, cfg.tile_size, keep ? &T.lse[job] : nullptr);
            }
            scatter(att, s, c0, oh);
        }

        MatrixF o = lin_forward(m, L.o, att, opts, keep ? &T.co : nullptr);
        MatrixF x_mid = x;
        for (std::size_t i = 0; i < x_mid.size(); ++i) {
            x_mid.data()[i] += o.data()[i];
        }
        MatrixF f;
        rmsnorm(x_mid, L.ffn_norm, f, T.inv2);
        MatrixF h;
        MatrixF g;
        MatrixF u;
        if (cfg.ffn_kind == FfnKind::gated_silu) {
            g = lin_forward(m, L.gate, f, opts, keep ? &T.cg : nullptr);
            u = lin_forward(m, L.up, f, opts, keep ? &T.cu : nullptr);
            h = MatrixF(n, g.cols());
            for (std::size_t i = 0; i < h.size(); ++i) {
                const float gv = g.data()[i];
                h.data()[i] = gv * sigmoid(gv) * u.data()[i];
            }
        } else {
            u = lin_forward(m, L.up, f, opts, keep ? &T.cu : nullptr);
            h = MatrixF(n, u.cols());
            for (std::size_t i = 0; i < h.size(); ++i) {
                h.data()[i] = gelu(u.data()[i]);
            }
        }
        MatrixF dn = lin_forward(m, L.down, h, opts, keep ? &T.cd : nullptr);
        MatrixF x_out = x_mid;
        for (std::size_t i = 0; i < x_out.size(); ++i) {
            x_out.data()[i] += dn.data()[i];
        }
        if (keep) {
            T.x_in = std::move(x);
            T.a = std::move(a);
            T.q = std::move(q);
            T.k = std::move(k);
            T.v = std::move(v);
            T.attn = std::move(att);
            T.x_mid = std::move(x_mid);
            T.f = std::move(f);
            T.g = std::move(g);
            T.u = std::move(u);
            T.h = std::move(h);
        }
        x = std::move(x_out);
    }

    MatrixF z;
    std::vector<float> inv;
    rmsnorm(x, m.final_norm, z, inv);
    MatrixF logits = kernels::matmul_nt(z, m.lm_head);
    if (tape != nullptr) {
        tape->x_final = std::move(x);
        tape->inv_final = std::move(inv);
    }
    return logits;
}

// Loss over masked targets; optionally turns `logits` into dL/dlogits.
LossResult compute_loss(const std::vector<Sequence>& batch, const std::vector<Span>& spans, MatrixF& logits,
                        const ForwardOptions& opts, bool make_grad) {
    LossResult res;
    const std::size_t vocab = logits.cols();
    std::vector<std::uint8_t> target_row(logits.rows(), 0);
    std::vector<int> target_tok(logits.rows(), 0);
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const auto& seq = batch[s];
        for (std::size_t t = 1; t < seq.tokens.size(); ++t) {
            if (!seq.mask.empty() && seq.mask[t] != 0) {
                const std::size_t r = spans[s].off + t - 1;
                target_row[r] = 1;
                target_tok[r] = seq.tokens[t];
                ++res.target_count;
            }
        }
    }
    const double denom = opts.loss_denominator > 0.0 ? opts.loss_denominator : static_cast<double>(res.target_count);
    std::vector<double> probs(vocab);
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        float* row = &logits(r, 0);
        if (target_row[r] == 0) {
            if (make_grad) {
                std::fill_n(row, vocab, 0.0f);
            }
            continue;
        }
        double mx = row[0];
        for (std::size_t j = 1; j < vocab; ++j) {
            mx = std::max(mx, static_cast<double>(row[j]));
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) {
            probs[j] = std::exp(static_cast<double>(row[j]) - mx);
            sum += probs[j];
        }
        const double lse = mx + std::log(sum);
        const auto tok = static_cast<std::size_t>(target_tok[r]);
        res.nll_sum += lse - static_cast<double>(row[tok]);
        if (make_grad) {
            for (std::size_t j = 0; j < vocab; ++j) {
                row[j] = static_cast<float>(probs[j] / sum / denom);
            }
            row[tok] -= static_cast<float>(1.0 / denom);
        }
    }
    if (res.target_count == 0) {
        res.empty_mask = true;
        res.loss = 0.0;
    } else {
        res.loss = res.nll_sum / denom;
    }
    if (!std::isfinite(res.loss)) {
        throw NumericalError("forward: non-finite loss");
    }
    return res;
}

}  // namespace

LossResult forward_loss(const NanoTransformer& m, const std::vector<Sequence>& batch, const ForwardOptions& opts) {
    MatrixF logits = run_forward(m, batch, opts, nullptr);
    const auto spans = make_spans(m, batch);
    LossResult res = compute_loss(batch, spans, logits, opts, false);
    if (opts.keep_logits) {
        res.logits = std::move(logits);
    }
    return res;
}

LossResult forward_backward(const NanoTransformer& m, const std::vector<Sequence>& batch, const ForwardOptions& opts,
                            AdapterGradMap& grads) {
    Tape tape;
    MatrixF dlogits = run_forward(m, batch, opts, &tape);
    MatrixF kept;
    if (opts.keep_logits) {
        kept = dlogits;
    }
    LossResult res = compute_loss(batch, tape.spans, dlogits, opts, true);
    res.logits = std::move(kept);
    if (res.empty_mask) {
        return res;
    }

    const auto& cfg = m.cfg;
    const std::size_t n = dlogits.rows();
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t hd = static_cast<std::size_t>(cfg.head_dim());
    const int nh = cfg.n_heads;
    const bool naive = cfg.kernel == attn::Kernel::naive;
    std::size_t max_len = 0;
    for (const auto& s : tape.spans) {
        max_len = std::max(max_len, s.len);
    }
    const RopeTable rope = rope_table(max_len, hd);

    // Gradient flow can stop below the lowest adapted layer.
    std::size_t lowest = m.layers.size();
    for (std::size_t li = 0; li < m.layers.size(); ++li) {
        const Layer& L = m.layers[li];
        if (L.q.adapter || L.k.adapter || L.v.adapter || L.o.adapter || L.gate.adapter || L.up.adapter ||
            L.down.adapter) {
            lowest = li;
            break;
        }
    }
    if (lowest == m.layers.size()) {
        return res;
    }

    MatrixF dz = kernels::matmul(dlogits, m.lm_head);
    MatrixF dx(n, d);
    rmsnorm_backward(tape.x_final, tape.inv_final, m.final_norm, dz, dx);

    for (std::size_t li = m.layers.size(); li-- > lowest;) {
        const Layer& L = m.layers[li];
        LayerTape& T = tape.layers[li];
        const bool below = li > lowest;

        // x_out = x_mid + down(h)
        MatrixF dh;
        lin_backward(L.down, T.h, T.cd, dx, true, dh, grads);
        MatrixF df(n, d);
        if (cfg.ffn_kind == FfnKind::gated_silu) {
            MatrixF dg(n, dh.cols());
            MatrixF du(n, dh.cols());
            for (std::size_t i = 0; i < dh.size(); ++i) {
                const float gv = T.g.data()[i];
                const float sg = sigmoid(gv);
                du.data()[i] = dh.data()[i] * gv * sg;
                dg.data()[i] = dh.data()[i] * T.u.data()[i] * sg * (1.0f + gv * (1.0f - sg));
            }
            MatrixF df2;
            lin_backward(L.gate, T.f, T.cg, dg, true, df, grads);
            lin_backward(L.up, T.f, T.cu, du, true, df2, grads);
            for (std::size_t i = 0; i < df.size(); ++i) {
                df.data()[i] += df2.data()[i];
            }
        } else {
            MatrixF du(n, dh.cols());
            for (std::size_t i = 0; i < dh.size(); ++i) {
                du.data()[i] = dh.data()[i] * gelu_grad(T.u.data()[i]);
            }
            lin_backward(L.up, T.f, T.cu, du, true, df, grads);
        }
        MatrixF dmid = dx;
        rmsnorm_backward(T.x_mid, T.inv2, L.ffn_norm, df, dmid);

        MatrixF datt;
        lin_backward(L.o, T.attn, T.co, dmid, true, datt, grads);

        MatrixF dq(n, d);
        MatrixF dk(n, d);
        MatrixF dv(n, d);
        const std::size_t jobs = tape.spans.size() * static_cast<std::size_t>(nh);
#pragma omp parallel for schedule(static)
        for (std::size_t job = 0; job < jobs; ++job) {
            const Span& s = tape.spans[job / static_cast<std::size_t>(nh)];
            const std::size_t c0 = (job % static_cast<std::size_t>(nh)) * hd;
            const MatrixF qh = slice(T.q, s, c0, hd);
            const MatrixF kh = slice(T.k, s, c0, hd);
            const MatrixF vh = slice(T.v, s, c0, hd);
            const MatrixF doh = slice(datt, s, c0, hd);
            MatrixF dqh;
            MatrixF dkh;
            MatrixF dvh;
            if (naive) {
                attn::attention_naive_backward(qh, kh, vh, T.probs[job], doh, 0.0f, dqh, dkh, dvh);
            } else {
                const MatrixF oh = slice(T.attn, s, c0, hd);
                attn::attention_streaming_backward(qh, kh, vh, oh, T.lse[job], doh, true, 0.0f, cfg.tile_size, dqh,
                                                   dkh, dvh);
            }
            scatter(dq, s, c0, dqh);
            scatter(dk, s, c0, dkh);
            scatter(dv, s, c0, dvh);
        }
        apply_rope(dq, tape.spans, nh, rope, true);
        apply_rope(dk, tape.spans, nh, rope, true);

        MatrixF da;
        MatrixF da2;
        MatrixF da3;
        lin_backward(L.q, T.a, T.cq, dq, below, da, grads);
        lin_backward(L.k, T.a, T.ck, dk, below, da2, grads);
        lin_backward(L.v, T.a, T.cv, dv, below, da3, grads);
        if (below) {
            for (std::size_t i = 0; i < da.size(); ++i) {
                da.data()[i] += da2.data()[i] + da3.data()[i];
            }
            dx = std::move(dmid);
            rmsnorm_backward(T.x_in, T.inv1, L.attn_norm, da, dx);
        }
    }
    return res;
}

MatrixF compute_logits(const NanoTransformer& m, const std::vector<int>& tokens) {
    std::vector<Sequence> batch(1);
    batch[0].tokens = tokens;
    return run_forward(m, batch, {}, nullptr);
}

std::vector<double> token_logprobs(const NanoTransformer& m, const std::vector<int>& tokens) {
    const MatrixF logits = compute_logits(m, tokens);
    std::vector<double> out;
    for (std::size_t t = 1; t < tokens.size(); ++t) {
        const float* row = &logits(t - 1, 0);
        double mx = row[0];
        for (std::size_t j = 1; j < logits.cols(); ++j) {
            mx = std::max(mx, static_cast<double>(row[j]));
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < logits.cols(); ++j) {
            sum += std::exp(static_cast<double>(row[j]) - mx);
        }
        out.push_back(static_cast<double>(row[tokens[t]]) - mx - std::log(sum));
    }
    return out;
}

std::vector<int> generate_greedy(const NanoTransformer& m, const std::vector<int>& prompt, int max_new_tokens) {
    std::vector<int> seq = prompt;
    std::vector<int> out;
    for (int i = 0; i < max_new_tokens && seq.size() < static_cast<std::size_t>(m.cfg.max_seq); ++i) {
        const MatrixF logits = compute_logits(m, seq);
        const float* row = &logits(logits.rows() - 1, 0);
        const auto best = static_cast<int>(std::max_element(row, row + logits.cols()) - row);
        if (best == ByteTokenizer::kEos) {
            break;
        }
        out.push_back(best);
        seq.push_back(best);
    }
    return out;
}

std::uint64_t activation_bytes_estimate(const NanoTransformerConfig& cfg, std::uint64_t tokens, std::uint64_t max_len) {
    const auto d = static_cast<std::uint64_t>(cfg.d_model);
    const auto f = static_cast<std::uint64_t>(cfg.d_ffn);
    const auto heads = static_cast<std::uint64_t>(cfg.n_heads);
    // Per layer: x_in, a, q, k, v, attn, x_mid, f (8 x d) plus g, u, h (3 x ffn)
    // and the attention weights or log-sum-exp per head.
    std::uint64_t per_layer = tokens * (8 * d + 3 * f) * 4;
    if (cfg.kernel == attn::Kernel::naive) {
        per_layer += heads * tokens * max_len * 4;
    } else {
        per_layer += heads * tokens * 4;
    }
    const auto vocab = static_cast<std::uint64_t>(cfg.vocab_size);
    return per_layer * static_cast<std::uint64_t>(cfg.n_layers) + tokens * (d + vocab) * 4;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

MatrixF vec_to_row(const std::vector<float>& v) { return MatrixF(1, v.size(), v); }

std::vector<float> row_to_vec(const MatrixF& m) { return {m.flat().begin(), m.flat().end()}; }

void put_adapter_meta(const NanoTransformer& m, std::map<std::string, std::string>& meta) {
    if (m.adapters) {
        meta["lora.target_modules"] = lora::to_string(m.adapters->targets);
        meta["lora.r"] = std::to_string(m.adapters->r);
        meta["lora.alpha"] = fmt_float(m.adapters->alpha);
        meta["lora.dropout"] = fmt_float(m.adapters->dropout);
    }
}

}  // namespace

Checkpoint to_checkpoint(const NanoTransformer& m) {
    Checkpoint ck;
    ck.metadata = m.cfg.to_metadata();
    ck.metadata["kind"] = "model";
    ck.metadata["model.frozen"] = m.frozen ? "1" : "0";
    ck.metadata["quant.compute_width"] = quant::to_string(m.policy.compute_width);
    ck.metadata["quant.c2_codec"] = quant::to_string(m.policy.c2_codec);
    ck.metadata["quant.block_size"] = std::to_string(m.block_size);
    ck.metadata["quant.superblock_size"] = std::to_string(m.superblock_size);
    put_adapter_meta(m, ck.metadata);

    ck.add_dense("embed", m.embed);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const std::string p = "layer" + std::to_string(i) + ".";
        ck.add_dense(p + "attn_norm", vec_to_row(m.layers[i].attn_norm));
        ck.add_dense(p + "ffn_norm", vec_to_row(m.layers[i].ffn_norm));
    }
    for (const Linear* l : m.linears()) {
        if (l->quantized) {
            ck.add_quantized(l->name, *l->quantized);
        } else {
            ck.add_dense(l->name, l->weight);
        }
        if (l->adapter) {
            ck.add_dense(l->name + ".lora_A", l->adapter->A);
            ck.add_dense(l->name + ".lora_B", l->adapter->B);
        }
    }
    ck.add_dense("final_norm", vec_to_row(m.final_norm));
    ck.add_dense("lm_head", m.lm_head);
    return ck;
}

namespace {

void read_adapters(NanoTransformer& m, const Checkpoint& ck) {
    if (ck.metadata.count("lora.target_modules") == 0) {
        return;
    }
    AdapterSettings s;
    s.targets = lora::parse_target_selector(ck.metadata.at("lora.target_modules"));
    s.r = static_cast<int>(parse_int("lora.r", meta_get(ck.metadata, "lora.r")));
    s.alpha = static_cast<float>(parse_real("lora.alpha", meta_get(ck.metadata, "lora.alpha")));
    s.dropout = static_cast<float>(parse_real("lora.dropout", meta_get(ck.metadata, "lora.dropout")));
    for (Linear* l : m.linears()) {
        l->adapter.reset();
    }
    for (const auto& name : lora::TargetSet::resolve(s.targets, m.matrix_names()).resolved) {
        Linear& l = m.linear(name);
        lora::LoRAAdapter ad;
        ad.rank = s.r;
        ad.alpha = s.alpha;
        ad.dropout_p = s.dropout;
        ad.target_name = name;
        ad.A = ck.dense(name + ".lora_A");
        ad.B = ck.dense(name + ".lora_B");
        if (ad.A.rows() != static_cast<std::size_t>(s.r) || ad.A.cols() != l.weight.cols() ||
            ad.B.rows() != l.weight.rows() || ad.B.cols() != static_cast<std::size_t>(s.r)) {
            throw DataError("checkpoint: adapter for '" + name + "' has wrong shape");
        }
        l.adapter = std::move(ad);
    }
    m.adapters = s;
}

}  // namespace

NanoTransformer from_checkpoint(const Checkpoint& ck) {
    NanoTransformer m;
    m.cfg = NanoTransformerConfig::from_metadata(ck.metadata);
    m.frozen = meta_get(ck.metadata, "model.frozen") == "1";
    m.policy.compute_width = quant::parse_compute_width(meta_get(ck.metadata, "quant.compute_width"));
    m.policy.c2_codec = quant::parse_c2_codec(meta_get(ck.metadata, "quant.c2_codec"));
    m.block_size = static_cast<std::size_t>(parse_int("quant.block_size", meta_get(ck.metadata, "quant.block_size")));
    m.superblock_size =
        static_cast<std::size_t>(parse_int("quant.superblock_size", meta_get(ck.metadata, "quant.superblock_size")));

    const auto& cfg = m.cfg;
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto f = static_cast<std::size_t>(cfg.d_ffn);
    const auto v = static_cast<std::size_t>(cfg.vocab_size);
    auto expect = [](const MatrixF& x, std::size_t r, std::size_t c, const std::string& name) {
        if (x.rows() != r || x.cols() != c) {
            throw DataError("checkpoint: tensor '" + name + "' has shape " + std::to_string(x.rows()) + "x" +
                            std::to_string(x.cols()) + ", expected " + std::to_string(r) + "x" + std::to_string(c));
        }
    };
    m.embed = ck.dense("embed");
    expect(m.embed, v, d, "embed");
    m.lm_head = ck.dense("lm_head");
    expect(m.lm_head, v, d, "lm_head");
    const MatrixF fn = ck.dense("final_norm");
    expect(fn, 1, d, "final_norm");
    m.final_norm = row_to_vec(fn);

    m.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    const bool gated = cfg.ffn_kind == FfnKind::gated_silu;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        auto& L = m.layers[i];
        const std::string p = "layer" + std::to_string(i) + ".";
        const MatrixF an = ck.dense(p + "attn_norm");
        const MatrixF gn = ck.dense(p + "ffn_norm");
        expect(an, 1, d, p + "attn_norm");
        expect(gn, 1, d, p + "ffn_norm");
        L.attn_norm = row_to_vec(an);
        L.ffn_norm = row_to_vec(gn);
        L.q.name = p + "attn.q";
        L.k.name = p + "attn.k";
        L.v.name = p + "attn.v";
        L.o.name = p + "attn.o";
        L.gate.name = gated ? p + "ffn.gate" : "";
        L.up.name = p + (gated ? "ffn.up" : "ffn.in");
        L.down.name = p + (gated ? "ffn.down" : "ffn.out");
    }
    for (Linear* l : m.linears()) {
        const auto& rec = ck.record(l->name);
        if (rec.dtype == DType::nf4) {
            l->quantized = ck.quantized(l->name);
            l->weight = quant::dequantize(*l->quantized, m.policy);
        } else {
            l->weight = ck.dense(l->name);
        }
        const auto role = lora::matrix_role(l->name);
        std::size_t rows = d;
        std::size_t cols = d;
        if (role == "ffn.gate" || role == "ffn.up" || role == "ffn.in") {
            rows = f;
        } else if (role == "ffn.down" || role == "ffn.out") {
            cols = f;
        }
        expect(l->weight, rows, cols, l->name);
    }
    read_adapters(m, ck);
    return m;
}

Checkpoint adapters_to_checkpoint(const NanoTransformer& m) {
    Checkpoint ck;
    ck.metadata["kind"] = "adapters";
    put_adapter_meta(m, ck.metadata);
    for (const Linear* l : m.linears()) {
        if (l->adapter) {
            ck.add_dense(l->name + ".lora_A", l->adapter->A);
            ck.add_dense(l->name + ".lora_B", l->adapter->B);
        }
    }
    return ck;
}

void load_adapters(NanoTransformer& m, const Checkpoint& ck) {
    if (ck.metadata.count("lora.target_modules") == 0) {
        throw DataError("adapter checkpoint has no lora metadata");
    }
    read_adapters(m, ck);
}

}  // namespace qlfg::model
