// Copyright (C) 2026 The qlfg Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <iostream>

#include "qlfg/cli.hpp"

int main(int argc, char** argv) { return qlfg::cli::run(argc, argv, std::cout, std::cerr); }
