// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include <boost/math/distributions/normal.hpp>

#include "qlfg/errors.hpp"
#include "qlfg/kernels.hpp"
#include "qlfg/quantize.hpp"
#include "qlfg/rng.hpp"

namespace {

namespace q = qlfg::quant;
using qlfg::MatrixF;

std::vector<float> normal_values(std::size_t n, std::uint64_t seed, double scale = 1.0) {
    qlfg::Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) {
        x = static_cast<float>(scale * rng.normal());
    }
    return v;
}

// Independent construction: quantiles at evenly spaced probabilities from
// `offset` to 0.5 (8 on the positive half, 7 on the negative), plus zero,
// normalized by the largest.
std::vector<double> derive_codebook() {
    const boost::math::normal_distribution<double> nd;
    const double offset = 1.0 - 0.5 * (1.0 / 32.0 + 1.0 / 30.0);
    std::vector<double> v;
    for (int i = 0; i < 8; ++i) {
        v.push_back(boost::math::quantile(nd, offset + i * (0.5 - offset) / 8.0));
    }
    for (int j = 0; j < 7; ++j) {
        v.push_back(-boost::math::quantile(nd, offset + j * (0.5 - offset) / 7.0));
    }
    v.push_back(0.0);
    std::sort(v.begin(), v.end());
    const double top = v.back();
    for (auto& x : v) {
        x /= top;
    }
    return v;
}

std::uint8_t brute_nearest(double x) {
    std::uint8_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::uint8_t i = 0; i < 16; ++i) {
        const double d = std::fabs(x - q::kNF4Codebook[i]);
        if (d < bd) {
            bd = d;
            best = i;
        }
    }
    return best;
}

TEST(NF4Codebook, InvariantsHold) {
    EXPECT_EQ(q::kNF4Codebook.front(), -1.0);
    EXPECT_EQ(q::kNF4Codebook.back(), 1.0);
    EXPECT_EQ(q::kNF4Codebook[q::kNF4ZeroCode], 0.0);
    for (std::size_t i = 0; i + 1 < 16; ++i) {
        EXPECT_LT(q::kNF4Codebook[i], q::kNF4Codebook[i + 1]);
    }
}

TEST(NF4Codebook, MatchesIndependentInverseNormalDerivation) {
    const auto ref = derive_codebook();
    ASSERT_EQ(ref.size(), 16u);
    for (std::size_t i = 0; i < 16; ++i) {
        EXPECT_NEAR(q::kNF4Codebook[i], ref[i], 1e-12) << i;
    }
}

TEST(NF4Codebook, NearestCodeMatchesExhaustiveSearch) {
    qlfg::Rng rng(3);
    for (int i = 0; i < 20000; ++i) {
        const double x = 2.0 * rng.uniform() - 1.0;
        EXPECT_EQ(q::nearest_nf4(x), brute_nearest(x)) << x;
    }
    // An exact midpoint goes to the lower index.
    for (std::size_t i = 0; i + 1 < 16; ++i) {
        const double mid = 0.5 * (q::kNF4Codebook[i] + q::kNF4Codebook[i + 1]);
        EXPECT_EQ(q::nearest_nf4(mid), i);
    }
}

TEST(Quantize, ZeroBlockUsesZeroCodeAndRoundTrips) {
    const std::vector<float> z(64, 0.0f);
    const auto qt = q::quantize_nf4(z, {1, 64}, 64, 256, {});
    for (std::size_t i = 0; i < 64; ++i) {
        EXPECT_EQ(qt.code(i), q::kNF4ZeroCode);
    }
    EXPECT_EQ(qt.decoded_absmax(0), 0.0f);
    const auto d = q::dequantize(qt);
    for (float x : d.flat()) {
        EXPECT_EQ(x, 0.0f);
    }
}

TEST(Quantize, CodebookFixedPointsAreExact) {
    const float absmax = 2.0f;
    std::vector<float> v(64);
    for (std::size_t i = 0; i < 64; ++i) {
        v[i] = absmax * static_cast<float>(q::kNF4Codebook[i % 16]);
    }
    const auto qt = q::quantize_nf4(v, {1, 64}, 64, 256, {});
    const auto d = q::dequantize(qt);
    for (std::size_t i = 0; i < 64; ++i) {
        EXPECT_EQ(qt.code(i), i % 16);
        EXPECT_EQ(d.flat()[i], v[i]);
    }
}

TEST(Quantize, CodesMatchBruteForceUnderDecodedAbsmax) {
    const auto v = normal_values(64, 42);
    const auto qt = q::quantize_nf4(v, {1, 64}, 64, 256, {});
    double absmax = 0.0;
    for (float x : v) {
        absmax = std::max(absmax, static_cast<double>(std::fabs(x)));
    }
    const double dec = qt.decoded_absmax(0);
    const auto d = q::dequantize(qt);
    for (std::size_t i = 0; i < 64; ++i) {
        EXPECT_EQ(qt.code(i), brute_nearest(static_cast<double>(v[i]) / absmax)) << i;
        const double err = std::fabs(static_cast<double>(d.flat()[i]) - v[i]);
        EXPECT_LE(err, dec * q::nf4_max_gap() / 2.0 + std::fabs(absmax - dec) + 1e-6);
    }
}

TEST(Quantize, ErrorBoundAcrossManyTensors) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto v = normal_values(64 * 300 + 17, seed, 0.1 + 0.05 * static_cast<double>(seed));
        const auto qt = q::quantize_nf4(v, {v.size()}, 64, 256, {});
        const auto d = q::dequantize(qt);
        for (std::size_t i = 0; i < v.size(); ++i) {
            const std::size_t b = i / 64;
            double absmax = 0.0;
            for (std::size_t j = b * 64; j < std::min(v.size(), b * 64 + 64); ++j) {
                absmax = std::max(absmax, static_cast<double>(std::fabs(v[j])));
            }
            const double dec = qt.decoded_absmax(b);
            const double bound = absmax * q::nf4_max_gap() / 2.0 + std::fabs(absmax - dec) + 1e-6 * absmax;
            ASSERT_LE(std::fabs(static_cast<double>(d.flat()[i]) - v[i]), bound) << seed << " " << i;
        }
    }
}

TEST(Quantize, ProjectionIsIdempotent) {
    for (auto codec : {q::C2Codec::affine8, q::C2Codec::fp8_e4m3, q::C2Codec::fp32}) {
        q::PrecisionPolicy p;
        p.c2_codec = codec;
        const MatrixF w(37, 64, normal_values(37 * 64, 9));
        const auto qt = q::quantize_nf4(w, 64, 4, p);
        const auto d1 = q::dequantize(qt, p);
        const auto qt2 = q::quantize_nf4(d1, 64, 4, p);
        EXPECT_EQ(qt2.codes, qt.codes) << q::to_string(codec);
        EXPECT_EQ(q::dequantize(qt2, p), d1) << q::to_string(codec);
    }
}

TEST(Quantize, PowerOfTwoScalingPreservesCodes) {
    const auto v = normal_values(64 * 40, 12);
    std::vector<float> s(v.size());
    std::transform(v.begin(), v.end(), s.begin(), [](float x) { return 8.0f * x; });
    const auto a = q::quantize_nf4(v, {v.size()}, 64, 256, {});
    const auto b = q::quantize_nf4(s, {s.size()}, 64, 256, {});
    EXPECT_EQ(a.codes, b.codes);
    EXPECT_EQ(a.c2_codes, b.c2_codes);
}

TEST(Quantize, StorageAccountingIsFormulaExact) {
    const std::size_t n = 1024 * 1024;
    const std::size_t blocks = n / 64;
    const std::size_t supers = (blocks + 255) / 256;
    const auto v = normal_values(n, 1);
    const auto qt = q::quantize_nf4(v, {1024, 1024}, 64, 256, {});
    EXPECT_EQ(qt.payload_bytes(), n / 2 + blocks + supers * 4);
    EXPECT_DOUBLE_EQ(qt.bits_per_param(), 4.0 + 8.0 / 64.0 + 32.0 / (64.0 * 256.0));
    EXPECT_NEAR(qt.bits_per_param(), 4.1272, 1e-3);
    EXPECT_DOUBLE_EQ(q::storage_bits_per_param(n, 64, 256, q::C2Codec::fp32), 4.5);
    EXPECT_DOUBLE_EQ(q::storage_bits_per_param(n, 64, 256, q::C2Codec::affine8), qt.bits_per_param());
}

TEST(Quantize, RejectsBadInputs) {
    std::vector<float> v(64, 1.0f);
    EXPECT_THROW(q::quantize_nf4(v, {64}, 1, 256, {}), qlfg::ConfigError);
    v[17] = std::numeric_limits<float>::quiet_NaN();
    try {
        q::quantize_nf4(v, {64}, 64, 256, {});
        FAIL();
    } catch (const qlfg::DataError& e) {
        EXPECT_NE(std::string(e.what()).find("17"), std::string::npos);
    }
}

TEST(Quantize, ValidateRejectsCorruptC1) {
    const auto v = normal_values(256, 2);
    auto qt = q::quantize_nf4(v, {256}, 64, 256, {});
    EXPECT_NO_THROW(q::validate(qt));
    qt.c1[0] = -1.0f;
    EXPECT_THROW(q::validate(qt), qlfg::DataError);
}

TEST(Quantize, ParallelMatchesSerial) {
    const auto v = normal_values(64 * 513 + 5, 4);
    const q::PrecisionPolicy p;
    const auto a = q::quantize_nf4(v, {v.size()}, 64, 256, p);
    const auto b = q::serial::quantize_nf4(v, {v.size()}, 64, 256, p);
    EXPECT_EQ(a, b);
    EXPECT_EQ(q::dequantize(a), q::serial::dequantize(a));
}

TEST(QuantizedMatmul, MatchesMaterializedReference) {
    qlfg::Rng rng(7);
    MatrixF x(8, 16);
    for (auto& e : x.flat()) {
        e = static_cast<float>(rng.normal());
    }
    const MatrixF w(16, 4, normal_values(64, 8));
    const auto qt = q::quantize_nf4(w, 16, 256, {});
    const auto dense = q::dequantize(qt);
    const auto ref = qlfg::kernels::matmul(x, dense);
    const auto got = q::quantized_matmul(x, qt);
    for (std::size_t i = 0; i < ref.size(); ++i) {
        EXPECT_LE(std::fabs(got.flat()[i] - ref.flat()[i]), 1e-5 * std::max(1.0f, std::fabs(ref.flat()[i])));
    }
    MatrixF eye(16, 16);
    for (std::size_t i = 0; i < 16; ++i) {
        eye(i, i) = 1.0f;
    }
    EXPECT_EQ(q::quantized_matmul(eye, qt), dense);
    EXPECT_THROW(q::quantized_matmul(MatrixF(2, 5), qt), qlfg::DimensionError);
}

TEST(QuantizedLinear, MatchesTransposedReference) {
    qlfg::Rng rng(17);
    MatrixF x(5, 64);
    for (auto& e : x.flat()) {
        e = static_cast<float>(rng.normal());
    }
    const MatrixF w(12, 64, normal_values(12 * 64, 18));
    const auto qt = q::quantize_nf4(w);
    const auto ref = qlfg::kernels::matmul_nt(x, q::dequantize(qt));
    const auto got = q::quantized_linear(x, qt);
    for (std::size_t i = 0; i < ref.size(); ++i) {
        EXPECT_LE(std::fabs(got.flat()[i] - ref.flat()[i]), 1e-5 * std::max(1.0f, std::fabs(ref.flat()[i])));
    }
}

TEST(Bf16, RoundsToNearestEven) {
    EXPECT_EQ(q::round_bf16(1.0f), 1.0f);
    // 1 + 2^-8 is exactly halfway between 1 and 1 + 2^-7; ties go to even (1).
    EXPECT_EQ(q::round_bf16(1.0f + 0x1.0p-8f), 1.0f);
    EXPECT_EQ(q::round_bf16(1.0f + 0x1.8p-8f), 1.0f + 0x1.0p-7f);
    EXPECT_EQ(q::round_bf16(1.0f + 3 * 0x1.0p-8f), 1.0f + 0x1.0p-6f);
}

TEST(Fp8, EncodeDecodeRoundTripsRepresentableValues) {
    for (int c = 0; c < 0x7F; ++c) {
        const float v = q::fp8_e4m3_decode(static_cast<std::uint8_t>(c));
        EXPECT_EQ(q::fp8_e4m3_encode_nonneg(v), c) << c;
    }
    EXPECT_EQ(q::fp8_e4m3_decode(0x7E), 448.0f);
}

}  // namespace
