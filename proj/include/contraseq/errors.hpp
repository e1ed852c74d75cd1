#pragma once

#include <stdexcept>
#include <string>

namespace contraseq {

// Error taxonomy: one exception type per failure class so callers can map
// them to exit codes without string matching.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shape disagreement (dimensions named in the message).
struct shape_error : error {
  using error::error;
};

// Invalid model/training/task configuration.
struct config_error : error {
  using error::error;
};

// A caller violated an operation's precondition.
struct contract_error : error {
  using error::error;
};

// Non-finite values where finite ones are required.
struct numeric_error : error {
  using error::error;
};

// Bad or inconsistent input data (corpora, contrastive sets).
struct data_error : error {
  using error::error;
};

// Malformed file content; message carries the line number.
struct parse_error : error {
  using error::error;
};

// Token id outside the vocabulary.
struct vocab_error : error {
  using error::error;
};

// Sequence longer than the configured maximum.
struct length_error : error {
  using error::error;
};

}  // namespace contraseq
