#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace dali::cli {

inline constexpr char kVersion[] = "0.1.0";

/// Entry point of the `dali` tool. Returns 0 on success, 1 on a domain error
/// (message on `err`) and 2 on a usage or configuration error.
int run(int argc, const char* const* argv, std::ostream& out = std::cout,
        std::ostream& err = std::cerr);
/// Same, with the arguments after the program name.
int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
        std::ostream& err = std::cerr);

}  // namespace dali::cli
