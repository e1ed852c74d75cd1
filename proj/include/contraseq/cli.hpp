#pragma once

#include <string>
#include <vector>

namespace contraseq {

// Batch entry point: `contraseq <generate|train|score|eval|report>
// [--config FILE] [--key value]...`. Later overrides win. Exit codes:
// 0 success, 2 configuration problem (unknown key, bad value), 3 input file
// problem (missing or malformed), 4 numeric/training failure.
int run_cli(const std::vector<std::string>& args);

}  // namespace contraseq
