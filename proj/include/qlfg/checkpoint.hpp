// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "qlfg/matrix.hpp"
#include "qlfg/quantize.hpp"

namespace qlfg {

// Binary container shared by model, adapter and optimizer checkpoints.
//
// Layout (all integers little-endian):
//   "QLFG" | u32 version | u32 metadata_len | metadata (UTF-8 "key=value\n" lines,
//   keys sorted) | u32 tensor_count | directory | payloads
//   directory entry: u32 name_len | name | u8 dtype | u32 rank | u64 dims[rank] |
//                    u64 byte_offset (from start of file) | u64 byte_length
//
// dtype f32: row-major float32 values.
// dtype nf4: u32 block_size | u32 superblock_size | u8 c2_codec | codes |
//            c2 codes | c1 records (float32), in that order.
enum class DType : std::uint8_t { f32 = 0, nf4 = 1 };

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kQuantizedHeaderBytes = 9;

struct TensorRecord {
    std::string name;
    DType dtype = DType::f32;
    std::vector<std::uint64_t> shape;
    std::vector<std::uint8_t> payload;
};

class Checkpoint {
public:
    std::map<std::string, std::string> metadata;

    void add_dense(const std::string& name, const MatrixF& m);
    void add_quantized(const std::string& name, const quant::QuantizedTensor& qt);

    bool contains(const std::string& name) const;
    const TensorRecord& record(const std::string& name) const;
    MatrixF dense(const std::string& name) const;
    quant::QuantizedTensor quantized(const std::string& name) const;
    const std::vector<TensorRecord>& tensors() const { return tensors_; }

    std::vector<std::uint8_t> serialize() const;
    static Checkpoint deserialize(std::span<const std::uint8_t> bytes);

    void save(const std::filesystem::path& path) const;
    static Checkpoint load(const std::filesystem::path& path);

private:
    void add(TensorRecord rec);
    std::vector<TensorRecord> tensors_;
};

std::vector<std::uint8_t> encode_quantized_payload(const quant::QuantizedTensor& qt);
quant::QuantizedTensor decode_quantized_payload(std::span<const std::uint8_t> payload,
                                                const std::vector<std::uint64_t>& shape);

}  // namespace qlfg
