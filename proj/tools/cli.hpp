// Copyright 2026 The DRM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace drm::cli {

/// Exit codes of the drm-merge tool.
enum ExitCode : int {
  kOk = 0,
  kArgumentError = 2,
  kIoError = 3,
  kNumericalError = 4,
};

/// Runs `drm-merge` with the given argv (argv[0] is the program name).
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Convenience overload for tests: args exclude the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Parses "a:b:step" into a + k*step for every k with a + k*step <= b.
std::vector<double> parse_range(const std::string& spec);

/// Parses "F" or "F,F,...".
std::vector<double> parse_list(const std::string& spec);

}  // namespace drm::cli
