#pragma once

#include <stdexcept>
#include <string>

namespace vf {

// Failure categories. The CLI maps these onto process exit codes.
enum class ErrorKind {
  Usage,       // bad invocation or configuration
  Dimension,   // tensor shape mismatch
  Numeric,     // NaN/Inf, divergence
  Degenerate,  // input that admits no meaningful result
  Id,          // token id out of range
  Length,      // sequence longer than the model allows
  Cache,       // backward requested on a trace without activations
  Format,      // malformed file, bad magic, version or checksum mismatch
  Duplicate,   // repeated string in an extension request
  SingleToken, // extension string already a single base token
  Pattern,     // invalid matcher pattern
  Alignment,   // sequences do not decode to the same bytes
  Config,      // objective/config combination that cannot run
  Training,    // optimizer or training loop failure
  Input,       // missing or empty data
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

const char* to_string(ErrorKind kind) noexcept;

// 1 = usage, 2 = data/format, 3 = numeric/training.
int exit_code(ErrorKind kind) noexcept;

}  // namespace vf
