// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "qlfg/tokenizer.hpp"

namespace qlfg::model {

std::vector<int> ByteTokenizer::encode(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) {
        ids.push_back(c);
    }
    return ids;
}

std::string ByteTokenizer::decode(const std::vector<int>& ids) {
    std::string out;
    for (int id : ids) {
        if (id >= 0 && id < 256) {
            out.push_back(static_cast<char>(id));
        }
    }
    return out;
}

}  // namespace qlfg::model
