// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qlfg::train {

enum class OptimizerKind : std::uint8_t { adamw_fp32 = 0, adamw_8bit = 1 };

std::string to_string(OptimizerKind k);
// Accepts adamw_fp32, adamw_8bit and paged_adamw_8bit (paging is not modeled).
OptimizerKind parse_optimizer(std::string_view s);

inline constexpr std::size_t kStateBlockSize = 256;

// Block-quantized moments for one tensor. m uses a signed linear absmax code
// (code / 127 * absmax), v an unsigned one (code / 255 * absmax). A positive
// v never encodes to 0.
struct Moments8bit {
    std::vector<std::int8_t> m_codes;
    std::vector<std::uint8_t> v_codes;
    std::vector<float> m_absmax;
    std::vector<float> v_absmax;
};

struct ParamRef {
    std::string name;
    std::span<float> value;
    std::span<const float> grad;
};

// Decoupled-weight-decay Adam with bias correction:
//   m = b1 m + (1-b1) g,  v = b2 v + (1-b2) g^2
//   p = p (1 - lr wd) - lr (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
// The 8-bit variant decodes moments, applies the same update in fp32 and
// re-encodes them.
class AdamW {
public:
    explicit AdamW(OptimizerKind kind = OptimizerKind::adamw_8bit, double beta1 = 0.9, double beta2 = 0.999,
                   double eps = 1e-8, std::size_t block_size = kStateBlockSize);

    // One step over all tensors. Throws NumericalError naming the tensor and
    // step on a non-finite gradient, before any parameter is modified.
    void step(const std::vector<ParamRef>& params, double lr, double weight_decay);

    OptimizerKind kind() const { return kind_; }
    std::uint64_t step_count() const { return step_count_; }
    std::size_t block_size() const { return block_size_; }

    // Bytes held for moment state across all tensors seen so far.
    std::uint64_t state_bytes() const;

    // Decoded moments, for inspection and tests.
    std::vector<float> first_moment(const std::string& name) const;
    std::vector<float> second_moment(const std::string& name) const;

private:
    struct Slot {
        std::size_t size = 0;
        std::vector<float> m;  // fp32 state
        std::vector<float> v;
        Moments8bit q;  // 8-bit state
    };

    Slot& slot(const std::string& name, std::size_t size);
    void encode(Slot& s, const std::vector<float>& m, const std::vector<float>& v) const;
    void decode(const Slot& s, std::vector<float>& m, std::vector<float>& v) const;

    OptimizerKind kind_;
    double beta1_;
    double beta2_;
    double eps_;
    std::size_t block_size_;
    std::uint64_t step_count_ = 0;
    std::map<std::string, Slot> slots_;
};

// Closed-form state size for tensors of the given sizes: 8 bytes per parameter
// in fp32, otherwise 2 * (n + 4 * ceil(n / block_size)) per tensor.
std::uint64_t optimizer_state_bytes(OptimizerKind kind, const std::vector<std::uint64_t>& tensor_sizes,
                                    std::size_t block_size = kStateBlockSize);

}  // namespace qlfg::train
