// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) {
    std::ios::sync_with_stdio(false);
    const std::vector<std::string> args(argv + 1, argv + argc);
    const int rc = flowlens::cli::run_cli(args, std::cout, std::cerr);
    std::cout.flush();
    return rc;
}
