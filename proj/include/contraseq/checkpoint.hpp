#pragma once

// Binary checkpoint format, shared by training and evaluation:
//   magic "CSEQ1\n"
//   u32 LE  byte length of the UTF-8 config block (key=value lines)
//   config block
//   u32 LE  tensor count
//   per tensor: u32 LE name length, name bytes, u32 LE rank,
//               u32 LE dims..., raw little-endian f32 data
// Parameters round-trip bit-exactly. Tied embedding tables are stored once.

#include <string>

#include "contraseq/model.hpp"

namespace contraseq {

inline const std::string kCheckpointMagic = "CSEQ1\n";

void save_checkpoint(const std::string& path, const Model& model);
Model load_checkpoint(const std::string& path);

}  // namespace contraseq
