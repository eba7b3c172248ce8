// SPDX-License-Identifier: Apache-2.0
//
// Command dispatch for the flowlens tool. Exit codes: 0 success, 1 usage,
// config or input error, 2 tunnel open failure.

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace flowlens::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitTunnel = 2;

// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace flowlens::cli
