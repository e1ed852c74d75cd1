#pragma once

#include <string>

namespace contraseq {

// Reserved vocabulary ids, fixed across every vocabulary and checkpoint.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;

inline const std::string kPadToken = "<pad>";
inline const std::string kBosToken = "<bos>";
inline const std::string kEosToken = "<eos>";
inline const std::string kUnkToken = "<unk>";

}  // namespace contraseq
