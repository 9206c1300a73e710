// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "qlfg/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "qlfg/errors.hpp"

namespace qlfg::train {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adamw_fp32 ? "adamw_fp32" : "adamw_8bit"; }

OptimizerKind parse_optimizer(std::string_view s) {
    if (s == "adamw_fp32") {
        return OptimizerKind::adamw_fp32;
    }
    if (s == "adamw_8bit" || s == "paged_adamw_8bit") {
        return OptimizerKind::adamw_8bit;
    }
    throw ConfigError("unknown optimizer '" + std::string(s) + "' (expected adamw_fp32, adamw_8bit or paged_adamw_8bit)");
}

AdamW::AdamW(OptimizerKind kind, double beta1, double beta2, double eps, std::size_t block_size)
    : kind_(kind), beta1_(beta1), beta2_(beta2), eps_(eps), block_size_(block_size) {
    if (block_size_ < 1) {
        throw ConfigError("optimizer block size must be >= 1");
    }
}

AdamW::Slot& AdamW::slot(const std::string& name, std::size_t size) {
    auto [it, inserted] = slots_.try_emplace(name);
    Slot& s = it->second;
    if (inserted) {
        s.size = size;
        if (kind_ == OptimizerKind::adamw_fp32) {
            s.m.assign(size, 0.0f);
            s.v.assign(size, 0.0f);
        } else {
            const std::size_t blocks = (size + block_size_ - 1) / block_size_;
            s.q.m_codes.assign(size, 0);
            s.q.v_codes.assign(size, 0);
            s.q.m_absmax.assign(blocks, 0.0f);
            s.q.v_absmax.assign(blocks, 0.0f);
        }
    } else if (s.size != size) {
        throw DimensionError("optimizer: tensor '" + name + "' changed size");
    }
    return s;
}

void AdamW::decode(const Slot& s, std::vector<float>& m, std::vector<float>& v) const {
    m.resize(s.size);
    v.resize(s.size);
    for (std::size_t i = 0; i < s.size; ++i) {
        const std::size_t b = i / block_size_;
        m[i] = static_cast<float>(s.q.m_codes[i]) / 127.0f * s.q.m_absmax[b];
        v[i] = static_cast<float>(s.q.v_codes[i]) / 255.0f * s.q.v_absmax[b];
    }
}

void AdamW::encode(Slot& s, const std::vector<float>& m, const std::vector<float>& v) const {
    const std::size_t blocks = s.q.m_absmax.size();
    for (std::size_t b = 0; b < blocks; ++b) {
        const std::size_t lo = b * block_size_;
        const std::size_t hi = std::min(lo + block_size_, s.size);
        float am = 0.0f;
        float av = 0.0f;
        for (std::size_t i = lo; i < hi; ++i) {
            am = std::max(am, std::fabs(m[i]));
            av = std::max(av, v[i]);
        }
        s.q.m_absmax[b] = am;
        s.q.v_absmax[b] = av;
        for (std::size_t i = lo; i < hi; ++i) {
            if (am > 0.0f) {
                const float c = std::nearbyint(m[i] / am * 127.0f);
                s.q.m_codes[i] = static_cast<std::int8_t>(std::clamp(c, -127.0f, 127.0f));
            } else {
                s.q.m_codes[i] = 0;
            }
            if (av > 0.0f && v[i] > 0.0f) {
                const float c = std::nearbyint(v[i] / av * 255.0f);
                s.q.v_codes[i] = static_cast<std::uint8_t>(std::clamp(c, 1.0f, 255.0f));
            } else {
                s.q.v_codes[i] = 0;
            }
        }
    }
}

void AdamW::step(const std::vector<ParamRef>& params, double lr, double weight_decay) {
    if (!(lr >= 0.0)) {
        throw ConfigError("optimizer: learning rate must be >= 0");
    }
    const std::uint64_t t = step_count_ + 1;
    for (const auto& p : params) {
        if (p.value.size() != p.grad.size()) {
            throw DimensionError("optimizer: gradient size mismatch for '" + p.name + "'");
        }
        for (std::size_t i = 0; i < p.grad.size(); ++i) {
            if (!std::isfinite(p.grad[i])) {
                throw NumericalError("non-finite gradient in '" + p.name + "' at element " + std::to_string(i) +
                                     ", step " + std::to_string(t));
            }
        }
    }
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t));
    const double decay = 1.0 - lr * weight_decay;
    std::vector<float> m;
    std::vector<float> v;
    for (const auto& p : params) {
        Slot& s = slot(p.name, p.value.size());
        if (kind_ == OptimizerKind::adamw_fp32) {
            m.swap(s.m);
            v.swap(s.v);
        } else {
            decode(s, m, v);
        }
        for (std::size_t i = 0; i < s.size; ++i) {
            const double g = p.grad[i];
            const double mi = beta1_ * m[i] + (1.0 - beta1_) * g;
            const double vi = beta2_ * v[i] + (1.0 - beta2_) * g * g;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double upd = (mi / bc1) / (std::sqrt(vi / bc2) + eps_);
            p.value[i] = static_cast<float>(static_cast<double>(p.value[i]) * decay - lr * upd);
        }
        if (kind_ == OptimizerKind::adamw_fp32) {
            m.swap(s.m);
            v.swap(s.v);
        } else {
            encode(s, m, v);
        }
    }
    step_count_ = t;
}

std::uint64_t AdamW::state_bytes() const {
    std::vector<std::uint64_t> sizes;
    for (const auto& [name, s] : slots_) {
        sizes.push_back(s.size);
    }
    return optimizer_state_bytes(kind_, sizes, block_size_);
}

std::vector<float> AdamW::first_moment(const std::string& name) const {
    const Slot& s = slots_.at(name);
    if (kind_ == OptimizerKind::adamw_fp32) {
        return s.m;
    }
    std::vector<float> m;
    std::vector<float> v;
    decode(s, m, v);
    return m;
}

std::vector<float> AdamW::second_moment(const std::string& name) const {
    const Slot& s = slots_.at(name);
    if (kind_ == OptimizerKind::adamw_fp32) {
        return s.v;
    }
    std::vector<float> m;
    std::vector<float> v;
    decode(s, m, v);
    return v;
}

std::uint64_t optimizer_state_bytes(OptimizerKind kind, const std::vector<std::uint64_t>& tensor_sizes,
                                    std::size_t block_size) {
    std::uint64_t bytes = 0;
    for (auto n : tensor_sizes) {
        if (kind == OptimizerKind::adamw_fp32) {
            bytes += 8 * n;
        } else {
            bytes += 2 * (n + 4 * ((n + block_size - 1) / block_size));
        }
    }
    return bytes;
}

}  // namespace qlfg::train
