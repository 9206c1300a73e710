// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace qlfg::model {

// Byte-level tokenizer: ids 0..255 are raw bytes, followed by three specials.
struct ByteTokenizer {
    static constexpr int kBos = 256;
    static constexpr int kEos = 257;
    static constexpr int kPad = 258;
    static constexpr int kVocabSize = 259;

    static std::vector<int> encode(std::string_view text);
    // Specials are dropped.
    static std::string decode(const std::vector<int>& ids);
};

}  // namespace qlfg::model
