// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "qlfg/quantize.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>

#include "qlfg/errors.hpp"
#include "qlfg/kernels.hpp"

namespace qlfg::quant {

namespace {

std::array<double, 15> make_midpoints() {
    std::array<double, 15> mid{};
    for (std::size_t i = 0; i < 15; ++i) {
        mid[i] = 0.5 * (kNF4Codebook[i] + kNF4Codebook[i + 1]);
    }
    return mid;
}

const std::array<double, 15>& midpoints() {
    static const std::array<double, 15> mid = make_midpoints();
    return mid;
}

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

std::uint8_t encode_c2(float absmax, float c1, C2Codec codec, std::uint8_t* dst) {
    switch (codec) {
        case C2Codec::affine8: {
            std::uint8_t code = 0;
            if (c1 > 0.0f) {
                const double r = static_cast<double>(absmax) / static_cast<double>(c1) * 255.0;
                code = static_cast<std::uint8_t>(std::clamp<long>(std::lround(r), 0, 255));
            }
            *dst = code;
            return code;
        }
        case C2Codec::fp8_e4m3: {
            std::uint8_t code = 0;
            if (c1 > 0.0f) {
                code = fp8_e4m3_encode_nonneg(static_cast<double>(absmax) / static_cast<double>(c1) * 448.0);
            }
            *dst = code;
            return code;
        }
        case C2Codec::fp32:
            std::memcpy(dst, &absmax, sizeof(float));
            return 0;
    }
    return 0;
}

float decode_c2(const std::uint8_t* src, float c1, C2Codec codec) {
    switch (codec) {
        case C2Codec::affine8:
            return c1 * (static_cast<float>(*src) / 255.0f);
        case C2Codec::fp8_e4m3:
            return c1 * (fp8_e4m3_decode(*src) / 448.0f);
        case C2Codec::fp32: {
            float v;
            std::memcpy(&v, src, sizeof(float));
            return v;
        }
    }
    return 0.0f;
}

void check_args(std::span<const float> values, const std::vector<std::size_t>& shape, std::size_t block_size,
                std::size_t superblock_size) {
    if (block_size < 2) {
        throw ConfigError("quantize_nf4: block_size must be >= 2, got " + std::to_string(block_size));
    }
    if (superblock_size < 1) {
        throw ConfigError("quantize_nf4: superblock_size must be >= 1");
    }
    const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    if (shape.empty() || n != values.size()) {
        throw DimensionError("quantize_nf4: shape does not match element count " + std::to_string(values.size()));
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw DataError("quantize_nf4: non-finite value at element " + std::to_string(i));
        }
    }
}

template <bool Parallel>
QuantizedTensor quantize_impl(std::span<const float> values, std::vector<std::size_t> shape,
                              std::size_t block_size, std::size_t superblock_size, const PrecisionPolicy& policy) {
    check_args(values, shape, block_size, superblock_size);

    QuantizedTensor qt;
    qt.shape = std::move(shape);
    qt.block_size = block_size;
    qt.superblock_size = superblock_size;
    qt.c2_codec = policy.c2_codec;

    const std::size_t n = values.size();
    const std::size_t nblocks = ceil_div(n, block_size);
    const std::size_t nsuper = ceil_div(nblocks, superblock_size);

    std::vector<float> absmax(nblocks, 0.0f);
    const auto nb = static_cast<std::ptrdiff_t>(nblocks);
#pragma omp parallel for schedule(static) if (Parallel && nb > 1)
    for (std::ptrdiff_t b = 0; b < nb; ++b) {
        const std::size_t lo = static_cast<std::size_t>(b) * block_size;
        const std::size_t hi = std::min(n, lo + block_size);
        float m = 0.0f;
        for (std::size_t i = lo; i < hi; ++i) {
            m = std::max(m, std::fabs(values[i]));
        }
        absmax[static_cast<std::size_t>(b)] = m;
    }

    // Second level: one c1 per superblock, then one c2 code per block.
    const std::size_t c2_bytes = c2_entry_bytes(policy.c2_codec);
    qt.c2_codes.assign(nblocks * c2_bytes, 0);
    if (policy.c2_codec != C2Codec::fp32) {
        qt.c1.assign(nsuper, 0.0f);
    }
    const auto ns = static_cast<std::ptrdiff_t>(nsuper);
#pragma omp parallel for schedule(static) if (Parallel && ns > 1)
    for (std::ptrdiff_t s = 0; s < ns; ++s) {
        const std::size_t lo = static_cast<std::size_t>(s) * superblock_size;
        const std::size_t hi = std::min(nblocks, lo + superblock_size);
        float c1 = 0.0f;
        for (std::size_t b = lo; b < hi; ++b) {
            c1 = std::max(c1, absmax[b]);
        }
        if (!qt.c1.empty()) {
            qt.c1[static_cast<std::size_t>(s)] = c1;
        }
        for (std::size_t b = lo; b < hi; ++b) {
            encode_c2(absmax[b], c1, policy.c2_codec, qt.c2_codes.data() + b * c2_bytes);
        }
    }

    // Element codes are taken against the true block absmax so the largest
    // element of every block lands exactly on +-1.
    qt.codes.assign(ceil_div(n, 2), 0);
    const auto nbytes = static_cast<std::ptrdiff_t>(qt.codes.size());
#pragma omp parallel for schedule(static) if (Parallel && nbytes > 1)
    for (std::ptrdiff_t byte = 0; byte < nbytes; ++byte) {
        std::uint8_t packed = 0;
        for (std::size_t half = 0; half < 2; ++half) {
            const std::size_t i = static_cast<std::size_t>(byte) * 2 + half;
            if (i >= n) {
                break;
            }
            const float a = absmax[i / block_size];
            std::uint8_t c = kNF4ZeroCode;
            if (a > 0.0f) {
                c = nearest_nf4(static_cast<double>(values[i]) / static_cast<double>(a));
            }
            packed |= static_cast<std::uint8_t>(c << (4 * half));
        }
        qt.codes[static_cast<std::size_t>(byte)] = packed;
    }
    return qt;
}

template <bool Parallel>
MatrixF dequantize_impl(const QuantizedTensor& qt, const PrecisionPolicy& policy) {
    validate(qt);
    const std::size_t n = qt.element_count();
    MatrixF out(qt.rows(), qt.cols());
    const std::vector<float> scale = qt.decoded_absmaxes();
    const auto& cb = nf4_codebook_f32();
    const auto ni = static_cast<std::ptrdiff_t>(n);
    float* dst = out.data();
#pragma omp parallel for schedule(static) if (Parallel && ni > 1)
    for (std::ptrdiff_t i = 0; i < ni; ++i) {
        const auto e = static_cast<std::size_t>(i);
        dst[e] = cb[qt.code(e)] * scale[e / qt.block_size];
    }
    if (policy.compute_width == ComputeWidth::bf16) {
        round_bf16_inplace(out.flat());
    }
    return out;
}

}  // namespace

const std::array<float, 16>& nf4_codebook_f32() {
    static const std::array<float, 16> cb = [] {
        std::array<float, 16> out{};
        for (std::size_t i = 0; i < 16; ++i) {
            out[i] = static_cast<float>(kNF4Codebook[i]);
        }
        return out;
    }();
    return cb;
}

double nf4_max_gap() {
    double g = 0.0;
    for (std::size_t i = 0; i + 1 < kNF4Codebook.size(); ++i) {
        g = std::max(g, kNF4Codebook[i + 1] - kNF4Codebook[i]);
    }
    return g;
}

std::uint8_t nearest_nf4(double normalized) {
    const auto& mid = midpoints();
    // Number of midpoints strictly below the value; a value sitting exactly on
    // a midpoint stays with the lower code.
    return static_cast<std::uint8_t>(std::lower_bound(mid.begin(), mid.end(), normalized) - mid.begin());
}

std::string to_string(ComputeWidth w) { return w == ComputeWidth::fp32 ? "fp32" : "bf16"; }

std::string to_string(C2Codec c) {
    switch (c) {
        case C2Codec::affine8: return "affine8";
        case C2Codec::fp8_e4m3: return "fp8_e4m3";
        case C2Codec::fp32: return "fp32";
    }
    return "?";
}

ComputeWidth parse_compute_width(std::string_view s) {
    if (s == "fp32" || s == "float32") {
        return ComputeWidth::fp32;
    }
    if (s == "bf16" || s == "bfloat16") {
        return ComputeWidth::bf16;
    }
    throw ConfigError("unknown compute width '" + std::string(s) + "' (expected float32 or bfloat16)");
}

C2Codec parse_c2_codec(std::string_view s) {
    if (s == "affine8") {
        return C2Codec::affine8;
    }
    if (s == "fp8_e4m3" || s == "fp8-e4m3" || s == "fp8") {
        return C2Codec::fp8_e4m3;
    }
    if (s == "fp32" || s == "none") {
        return C2Codec::fp32;
    }
    throw ConfigError("unknown c2 codec '" + std::string(s) + "' (expected affine8, fp8_e4m3 or fp32)");
}

std::size_t c2_entry_bytes(C2Codec c) { return c == C2Codec::fp32 ? 4 : 1; }
std::size_t c1_record_bytes(C2Codec c) { return c == C2Codec::fp32 ? 0 : 4; }

std::size_t QuantizedTensor::element_count() const {
    return shape.empty() ? 0 : std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}
std::size_t QuantizedTensor::block_count() const { return ceil_div(element_count(), block_size); }
std::size_t QuantizedTensor::superblock_count() const { return ceil_div(block_count(), superblock_size); }

std::size_t QuantizedTensor::rows() const {
    if (shape.size() <= 1) {
        return 1;
    }
    return element_count() / shape.back();
}
std::size_t QuantizedTensor::cols() const { return shape.empty() ? 0 : shape.back(); }

float QuantizedTensor::decoded_absmax(std::size_t block) const {
    const std::size_t bytes = c2_entry_bytes(c2_codec);
    const float c1v = c1.empty() ? 0.0f : c1[block / superblock_size];
    return decode_c2(c2_codes.data() + block * bytes, c1v, c2_codec);
}

std::vector<float> QuantizedTensor::decoded_absmaxes() const {
    std::vector<float> out(block_count());
    for (std::size_t b = 0; b < out.size(); ++b) {
        out[b] = decoded_absmax(b);
    }
    return out;
}

std::size_t QuantizedTensor::payload_bytes() const {
    return ceil_div(element_count(), 2) + block_count() * c2_entry_bytes(c2_codec) +
           (c2_codec == C2Codec::fp32 ? 0 : superblock_count() * c1_record_bytes(c2_codec));
}

double QuantizedTensor::bits_per_param() const {
    return 8.0 * static_cast<double>(payload_bytes()) / static_cast<double>(element_count());
}

double storage_bits_per_param(std::size_t n, std::size_t block_size, std::size_t superblock_size, C2Codec codec) {
    const std::size_t blocks = ceil_div(n, block_size);
    const std::size_t supers = ceil_div(blocks, superblock_size);
    const std::size_t bytes = ceil_div(n, 2) + blocks * c2_entry_bytes(codec) + supers * c1_record_bytes(codec);
    return 8.0 * static_cast<double>(bytes) / static_cast<double>(n);
}

QuantizedTensor quantize_nf4(const MatrixF& tensor, std::size_t block_size, std::size_t superblock_size,
                             const PrecisionPolicy& policy) {
    return quantize_nf4(tensor.flat(), {tensor.rows(), tensor.cols()}, block_size, superblock_size, policy);
}

QuantizedTensor quantize_nf4(std::span<const float> values, std::vector<std::size_t> shape, std::size_t block_size,
                             std::size_t superblock_size, const PrecisionPolicy& policy) {
    return quantize_impl<true>(values, std::move(shape), block_size, superblock_size, policy);
}

MatrixF dequantize(const QuantizedTensor& qt, const PrecisionPolicy& policy) {
    return dequantize_impl<true>(qt, policy);
}

namespace serial {
QuantizedTensor quantize_nf4(std::span<const float> values, std::vector<std::size_t> shape, std::size_t block_size,
                             std::size_t superblock_size, const PrecisionPolicy& policy) {
    return quantize_impl<false>(values, std::move(shape), block_size, superblock_size, policy);
}
MatrixF dequantize(const QuantizedTensor& qt, const PrecisionPolicy& policy) {
    return dequantize_impl<false>(qt, policy);
}
}  // namespace serial

void validate(const QuantizedTensor& qt) {
    if (qt.block_size < 2 || qt.superblock_size < 1) {
        throw DataError("quantized tensor: invalid block geometry");
    }
    const std::size_t n = qt.element_count();
    if (qt.codes.size() != ceil_div(n, 2)) {
        throw DataError("quantized tensor: code array holds " + std::to_string(qt.codes.size()) +
                        " bytes, expected " + std::to_string(ceil_div(n, 2)));
    }
    if (qt.c2_codes.size() != qt.block_count() * c2_entry_bytes(qt.c2_codec)) {
        throw DataError("quantized tensor: c2 array size does not match block count");
    }
    const std::size_t expect_c1 = qt.c2_codec == C2Codec::fp32 ? 0 : qt.superblock_count();
    if (qt.c1.size() != expect_c1) {
        throw DataError("quantized tensor: c1 array size does not match superblock count");
    }
    for (std::size_t s = 0; s < qt.c1.size(); ++s) {
        if (!std::isfinite(qt.c1[s]) || qt.c1[s] < 0.0f) {
            throw DataError("quantized tensor: corrupt c1 constant in superblock " + std::to_string(s) +
                            " (block " + std::to_string(s * qt.superblock_size) + ")");
        }
    }
    const std::size_t nb = qt.block_count();
    for (std::size_t b = 0; b < nb; ++b) {
        const float a = qt.decoded_absmax(b);
        if (!std::isfinite(a) || a < 0.0f) {
            throw DataError("quantized tensor: corrupt absmax in block " + std::to_string(b));
        }
    }
    // Odd element counts leave the high nibble of the final byte unused; it must be zero.
    if (n % 2 == 1 && (qt.codes.back() >> 4) != 0) {
        throw DataError("quantized tensor: padding nibble set in block " + std::to_string(nb - 1));
    }
}

MatrixF quantized_matmul(const MatrixF& x, const QuantizedTensor& qt, const PrecisionPolicy& policy) {
    validate(qt);
    const std::size_t k = qt.rows();
    const std::size_t d = qt.cols();
    if (x.cols() != k) {
        throw DimensionError("quantized_matmul: x has " + std::to_string(x.cols()) + " columns, weight has " +
                             std::to_string(k) + " rows");
    }
    const auto& cb = nf4_codebook_f32();
    const std::vector<float> scale = qt.decoded_absmaxes();
    MatrixF out(x.rows(), d);
    constexpr std::size_t kPanel = 32;
    std::vector<float> panel(kPanel * d);
    for (std::size_t p0 = 0; p0 < k; p0 += kPanel) {
        const std::size_t p1 = std::min(k, p0 + kPanel);
        const auto pe = static_cast<std::ptrdiff_t>((p1 - p0) * d);
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t t = 0; t < pe; ++t) {
            const std::size_t e = p0 * d + static_cast<std::size_t>(t);
            panel[static_cast<std::size_t>(t)] = cb[qt.code(e)] * scale[e / qt.block_size];
        }
        if (policy.compute_width == ComputeWidth::bf16) {
            round_bf16_inplace(std::span<float>(panel.data(), (p1 - p0) * d));
        }
        const auto nrows = static_cast<std::ptrdiff_t>(x.rows());
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t i = 0; i < nrows; ++i) {
            float* o = out.data() + static_cast<std::size_t>(i) * d;
            const float* xr = x.data() + static_cast<std::size_t>(i) * k;
            for (std::size_t p = p0; p < p1; ++p) {
                const float xv = xr[p];
                const float* w = panel.data() + (p - p0) * d;
                for (std::size_t j = 0; j < d; ++j) {
                    o[j] += xv * w[j];
                }
            }
        }
    }
    if (policy.compute_width == ComputeWidth::bf16) {
        round_bf16_inplace(out.flat());
    }
    return out;
}

MatrixF quantized_linear(const MatrixF& x, const QuantizedTensor& qt, const PrecisionPolicy& policy) {
    validate(qt);
    const std::size_t d = qt.rows();
    const std::size_t k = qt.cols();
    if (x.cols() != k) {
        throw DimensionError("quantized_linear: x has " + std::to_string(x.cols()) + " columns, weight has " +
                             std::to_string(k));
    }
    const auto& cb = nf4_codebook_f32();
    const std::vector<float> scale = qt.decoded_absmaxes();
    MatrixF out(x.rows(), d);
    const auto nd = static_cast<std::ptrdiff_t>(d);
#pragma omp parallel
    {
        std::vector<float> w(k);
#pragma omp for schedule(static)
        for (std::ptrdiff_t r = 0; r < nd; ++r) {
            const std::size_t base = static_cast<std::size_t>(r) * k;
            for (std::size_t c = 0; c < k; ++c) {
                w[c] = cb[qt.code(base + c)] * scale[(base + c) / qt.block_size];
            }
            if (policy.compute_width == ComputeWidth::bf16) {
                round_bf16_inplace(w);
            }
            for (std::size_t i = 0; i < x.rows(); ++i) {
                out(i, static_cast<std::size_t>(r)) = kernels::dot(x.data() + i * k, w.data(), k);
            }
        }
    }
    if (policy.compute_width == ComputeWidth::bf16) {
        round_bf16_inplace(out.flat());
    }
    return out;
}

float round_bf16(float x) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(x);
    if ((bits & 0x7F800000u) == 0x7F800000u) {
        // Inf stays Inf; NaN keeps a quiet payload bit.
        if ((bits & 0x007FFFFFu) != 0) {
            bits |= 0x00400000u;
        }
        return std::bit_cast<float>(bits & 0xFFFF0000u);
    }
    const std::uint32_t lsb = (bits >> 16) & 1u;
    bits += 0x7FFFu + lsb;
    return std::bit_cast<float>(bits & 0xFFFF0000u);
}

void round_bf16_inplace(std::span<float> xs) {
    for (float& v : xs) {
        v = round_bf16(v);
    }
}

float fp8_e4m3_decode(std::uint8_t code) {
    const bool neg = (code & 0x80) != 0;
    const int exp = (code >> 3) & 0x0F;
    const int man = code & 0x07;
    if (exp == 0x0F && man == 0x07) {
        return std::numeric_limits<float>::quiet_NaN();
    }
    float v;
    if (exp == 0) {
        v = std::ldexp(static_cast<float>(man) / 8.0f, -6);
    } else {
        v = std::ldexp(1.0f + static_cast<float>(man) / 8.0f, exp - 7);
    }
    return neg ? -v : v;
}

std::uint8_t fp8_e4m3_encode_nonneg(double value) {
    value = std::clamp(value, 0.0, 448.0);
    // Non-negative finite codes 0x00..0x7E are monotone in value.
    std::uint8_t lo = 0;
    std::uint8_t hi = 0x7E;
    while (hi - lo > 1) {
        const auto mid = static_cast<std::uint8_t>((lo + hi) / 2);
        if (static_cast<double>(fp8_e4m3_decode(mid)) <= value) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    const double dl = value - static_cast<double>(fp8_e4m3_decode(lo));
    const double dh = static_cast<double>(fp8_e4m3_decode(hi)) - value;
    return dh < dl ? hi : lo;
}

}  // namespace qlfg::quant
