// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "qlfg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "qlfg/errors.hpp"

namespace qlfg {

namespace {

class Writer {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) {
            buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
        }
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
        }
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
    void str(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    std::size_t size() const { return buf_.size(); }
    std::vector<std::uint8_t>& buf() { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
    void need(std::size_t n) const {
        if (pos_ + n > b_.size()) {
            throw DataError("checkpoint: truncated at byte " + std::to_string(pos_));
        }
    }
    std::uint8_t u8() {
        need(1);
        return b_[pos_++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
        }
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
        }
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::span<const std::uint8_t> take(std::size_t n) {
        need(n);
        auto s = b_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }

private:
    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

std::uint64_t element_count(const std::vector<std::uint64_t>& shape) {
    std::uint64_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

}  // namespace

std::vector<std::uint8_t> encode_quantized_payload(const quant::QuantizedTensor& qt) {
    Writer w;
    w.u32(static_cast<std::uint32_t>(qt.block_size));
    w.u32(static_cast<std::uint32_t>(qt.superblock_size));
    w.u8(static_cast<std::uint8_t>(qt.c2_codec));
    w.bytes(qt.codes);
    w.bytes(qt.c2_codes);
    for (float c : qt.c1) {
        w.f32(c);
    }
    return std::move(w.buf());
}

quant::QuantizedTensor decode_quantized_payload(std::span<const std::uint8_t> payload,
                                                const std::vector<std::uint64_t>& shape) {
    Reader r(payload);
    quant::QuantizedTensor qt;
    for (auto d : shape) {
        qt.shape.push_back(static_cast<std::size_t>(d));
    }
    qt.block_size = r.u32();
    qt.superblock_size = r.u32();
    const std::uint8_t codec = r.u8();
    if (codec > 2) {
        throw DataError("checkpoint: unknown c2 codec tag " + std::to_string(codec));
    }
    qt.c2_codec = static_cast<quant::C2Codec>(codec);
    if (qt.block_size < 2 || qt.superblock_size < 1) {
        throw DataError("checkpoint: invalid block geometry");
    }
    const std::size_t n = qt.element_count();
    auto codes = r.take((n + 1) / 2);
    qt.codes.assign(codes.begin(), codes.end());
    auto c2 = r.take(qt.block_count() * quant::c2_entry_bytes(qt.c2_codec));
    qt.c2_codes.assign(c2.begin(), c2.end());
    const std::size_t nc1 = qt.c2_codec == quant::C2Codec::fp32 ? 0 : qt.superblock_count();
    qt.c1.resize(nc1);
    for (auto& c : qt.c1) {
        c = r.f32();
    }
    if (r.pos() != payload.size()) {
        throw DataError("checkpoint: quantized payload has trailing bytes");
    }
    quant::validate(qt);
    return qt;
}

void Checkpoint::add(TensorRecord rec) {
    if (contains(rec.name)) {
        throw DataError("checkpoint: duplicate tensor name '" + rec.name + "'");
    }
    tensors_.push_back(std::move(rec));
}

void Checkpoint::add_dense(const std::string& name, const MatrixF& m) {
    TensorRecord rec;
    rec.name = name;
    rec.dtype = DType::f32;
    rec.shape = {m.rows(), m.cols()};
    Writer w;
    for (float v : m.flat()) {
        w.f32(v);
    }
    rec.payload = std::move(w.buf());
    add(std::move(rec));
}

void Checkpoint::add_quantized(const std::string& name, const quant::QuantizedTensor& qt) {
    TensorRecord rec;
    rec.name = name;
    rec.dtype = DType::nf4;
    for (auto d : qt.shape) {
        rec.shape.push_back(d);
    }
    rec.payload = encode_quantized_payload(qt);
    add(std::move(rec));
}

bool Checkpoint::contains(const std::string& name) const {
    for (const auto& t : tensors_) {
        if (t.name == name) {
            return true;
        }
    }
    return false;
}

const TensorRecord& Checkpoint::record(const std::string& name) const {
    for (const auto& t : tensors_) {
        if (t.name == name) {
            return t;
        }
    }
    throw DataError("checkpoint: missing tensor '" + name + "'");
}

MatrixF Checkpoint::dense(const std::string& name) const {
    const auto& rec = record(name);
    if (rec.dtype != DType::f32) {
        throw DataError("checkpoint: tensor '" + name + "' is not f32");
    }
    const std::uint64_t n = element_count(rec.shape);
    if (rec.payload.size() != n * 4) {
        throw DataError("checkpoint: tensor '" + name + "' payload size mismatch");
    }
    const std::size_t cols = rec.shape.empty() ? 0 : static_cast<std::size_t>(rec.shape.back());
    const std::size_t rows = cols == 0 ? 0 : static_cast<std::size_t>(n) / cols;
    MatrixF m(rows, cols);
    Reader r(rec.payload);
    for (auto& v : m.flat()) {
        v = r.f32();
    }
    return m;
}

quant::QuantizedTensor Checkpoint::quantized(const std::string& name) const {
    const auto& rec = record(name);
    if (rec.dtype != DType::nf4) {
        throw DataError("checkpoint: tensor '" + name + "' is not nf4");
    }
    return decode_quantized_payload(rec.payload, rec.shape);
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
    std::string meta;
    for (const auto& [k, v] : metadata) {
        meta += k;
        meta += '=';
        meta += v;
        meta += '\n';
    }

    // Directory size is known up front, so offsets can be written in one pass.
    std::size_t header = 4 + 4 + 4 + meta.size() + 4;
    for (const auto& t : tensors_) {
        header += 4 + t.name.size() + 1 + 4 + 8 * t.shape.size() + 8 + 8;
    }

    Writer w;
    w.str("QLFG");
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(meta.size()));
    w.str(meta);
    w.u32(static_cast<std::uint32_t>(tensors_.size()));
    std::uint64_t offset = header;
    for (const auto& t : tensors_) {
        w.u32(static_cast<std::uint32_t>(t.name.size()));
        w.str(t.name);
        w.u8(static_cast<std::uint8_t>(t.dtype));
        w.u32(static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) {
            w.u64(d);
        }
        w.u64(offset);
        w.u64(t.payload.size());
        offset += t.payload.size();
    }
    for (const auto& t : tensors_) {
        w.bytes(t.payload);
    }
    return std::move(w.buf());
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    if (r.str(4) != "QLFG") {
        throw DataError("checkpoint: bad magic");
    }
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw DataError("checkpoint: unsupported format version " + std::to_string(version));
    }
    Checkpoint ck;
    const std::string meta = r.str(r.u32());
    std::size_t pos = 0;
    while (pos < meta.size()) {
        std::size_t nl = meta.find('\n', pos);
        if (nl == std::string::npos) {
            nl = meta.size();
        }
        const std::string line = meta.substr(pos, nl - pos);
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw DataError("checkpoint: malformed metadata line '" + line + "'");
        }
        ck.metadata[line.substr(0, eq)] = line.substr(eq + 1);
        pos = nl + 1;
    }
    const std::uint32_t count = r.u32();
    struct Dir {
        TensorRecord rec;
        std::uint64_t offset;
        std::uint64_t length;
    };
    std::vector<Dir> dir;
    for (std::uint32_t i = 0; i < count; ++i) {
        Dir d;
        d.rec.name = r.str(r.u32());
        const std::uint8_t dt = r.u8();
        if (dt > 1) {
            throw DataError("checkpoint: unknown dtype tag " + std::to_string(dt) + " for '" + d.rec.name + "'");
        }
        d.rec.dtype = static_cast<DType>(dt);
        const std::uint32_t rank = r.u32();
        for (std::uint32_t j = 0; j < rank; ++j) {
            d.rec.shape.push_back(r.u64());
        }
        d.offset = r.u64();
        d.length = r.u64();
        if (d.offset > bytes.size() || d.length > bytes.size() - d.offset) {
            throw DataError("checkpoint: tensor '" + d.rec.name + "' extends past end of file");
        }
        dir.push_back(std::move(d));
    }
    for (auto& d : dir) {
        auto p = bytes.subspan(d.offset, d.length);
        d.rec.payload.assign(p.begin(), p.end());
        ck.add(std::move(d.rec));
    }
    return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot open '" + path.string() + "' for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw DataError("failed writing '" + path.string() + "'");
    }
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open checkpoint '" + path.string() + "'");
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

}  // namespace qlfg
