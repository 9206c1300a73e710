// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qlfg/matrix.hpp"

namespace qlfg::quant {

// 4-bit NormalFloat code points: normalized standard-normal quantiles taken at
// evenly spaced probabilities over each sign half (8 positive, 7 negative, an
// exact zero), scaled so the endpoints are -1 and +1. Frozen from an
// arbitrary-precision inverse normal CDF; tests re-derive them.
inline constexpr std::array<double, 16> kNF4Codebook = {
    -1.0,
    -0.69619280563234337380,
    -0.52507295944650090770,
    -0.39491742591990728144,
    -0.28444130892108227175,
    -0.18477340280045575132,
    -0.091049975985780496984,
    0.0,
    0.079580314958409123231,
    0.16093014438029081048,
    0.24611225134745955313,
    0.33791513671312801872,
    0.44070973186421645472,
    0.56261688796998518274,
    0.72295664415947375654,
    1.0,
};

inline constexpr std::uint8_t kNF4ZeroCode = 7;

// Codebook as used in fp32 compute.
const std::array<float, 16>& nf4_codebook_f32();

// Largest gap between adjacent code points (bounds the rounding error).
double nf4_max_gap();

// Index of the nearest code point to a normalized value; ties go to the lower
// index.
std::uint8_t nearest_nf4(double normalized);

enum class ComputeWidth : std::uint8_t { fp32 = 0, bf16 = 1 };

// Second-level codec for per-block absmax constants.
//   affine8  : 8-bit unsigned code relative to the superblock's largest absmax
//   fp8_e4m3 : FP8 (E4M3) ratio relative to the superblock's largest absmax
//   fp32     : no double quantization; absmax stored as float
enum class C2Codec : std::uint8_t { affine8 = 0, fp8_e4m3 = 1, fp32 = 2 };

struct PrecisionPolicy {
    ComputeWidth compute_width = ComputeWidth::fp32;
    C2Codec c2_codec = C2Codec::affine8;

    friend bool operator==(const PrecisionPolicy&, const PrecisionPolicy&) = default;
};

std::string to_string(ComputeWidth w);
std::string to_string(C2Codec c);
ComputeWidth parse_compute_width(std::string_view s);
C2Codec parse_c2_codec(std::string_view s);

// Bytes of one c2 entry per block and one c1 record per superblock.
std::size_t c2_entry_bytes(C2Codec c);
std::size_t c1_record_bytes(C2Codec c);

inline constexpr std::size_t kDefaultBlockSize = 64;
inline constexpr std::size_t kDefaultSuperblockSize = 256;

struct QuantizedTensor {
    std::vector<std::size_t> shape;
    std::size_t block_size = kDefaultBlockSize;
    std::size_t superblock_size = kDefaultSuperblockSize;
    C2Codec c2_codec = C2Codec::affine8;
    // Two codes per byte; even element in the low nibble.
    std::vector<std::uint8_t> codes;
    // One entry per block, c2_entry_bytes(c2_codec) bytes each.
    std::vector<std::uint8_t> c2_codes;
    // One fp32 record per superblock (empty for the fp32 codec).
    std::vector<float> c1;

    std::size_t element_count() const;
    std::size_t block_count() const;
    std::size_t superblock_count() const;
    std::size_t rows() const;
    std::size_t cols() const;

    std::uint8_t code(std::size_t element) const {
        const std::uint8_t b = codes[element / 2];
        return (element % 2 == 0) ? (b & 0x0F) : (b >> 4);
    }

    float decoded_absmax(std::size_t block) const;
    std::vector<float> decoded_absmaxes() const;

    // ceil(n/2) + blocks * c2 bytes + superblocks * c1 bytes.
    std::size_t payload_bytes() const;
    double bits_per_param() const;

    friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

// Closed-form storage cost, bits per parameter, excluding the fixed header.
double storage_bits_per_param(std::size_t n, std::size_t block_size, std::size_t superblock_size,
                              C2Codec codec);

QuantizedTensor quantize_nf4(const MatrixF& tensor, std::size_t block_size = kDefaultBlockSize,
                             std::size_t superblock_size = kDefaultSuperblockSize,
                             const PrecisionPolicy& policy = {});
QuantizedTensor quantize_nf4(std::span<const float> values, std::vector<std::size_t> shape,
                             std::size_t block_size, std::size_t superblock_size,
                             const PrecisionPolicy& policy);

MatrixF dequantize(const QuantizedTensor& qt, const PrecisionPolicy& policy = {});

// Throws DataError naming the offending block/superblock.
void validate(const QuantizedTensor& qt);

// x * dequantize(qt): x is n x k, qt is k x d. Decodes qt in row panels.
MatrixF quantized_matmul(const MatrixF& x, const QuantizedTensor& qt, const PrecisionPolicy& policy = {});

// x * dequantize(qt)^T: x is n x k, qt is d x k (linear layer with a
// quantized d x k weight). Decodes one weight row at a time.
MatrixF quantized_linear(const MatrixF& x, const QuantizedTensor& qt, const PrecisionPolicy& policy = {});

// Single-threaded references for the block-parallel paths.
namespace serial {
QuantizedTensor quantize_nf4(std::span<const float> values, std::vector<std::size_t> shape,
                             std::size_t block_size, std::size_t superblock_size,
                             const PrecisionPolicy& policy);
MatrixF dequantize(const QuantizedTensor& qt, const PrecisionPolicy& policy = {});
}  // namespace serial

// Round-to-nearest-even to bfloat16, returned as float.
float round_bf16(float x);
void round_bf16_inplace(std::span<float> xs);

// FP8 E4M3 (no infinities, 0x7F/0xFF are NaN, max finite 448).
float fp8_e4m3_decode(std::uint8_t code);
// Nearest non-negative code; ties to the lower code. Input is clamped to [0, 448].
std::uint8_t fp8_e4m3_encode_nonneg(double value);

}  // namespace qlfg::quant
