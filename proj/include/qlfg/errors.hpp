// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <stdexcept>
#include <string>

namespace qlfg {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid configuration or arguments. CLI exit code 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Operand shapes disagree.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Malformed input data or corrupt serialized state. CLI exit code 3.
class DataError : public Error {
public:
    using Error::Error;
};

// NaN/Inf encountered during training. CLI exit code 4.
class NumericalError : public Error {
public:
    using Error::Error;
};

}  // namespace qlfg
