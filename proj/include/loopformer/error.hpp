#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace loopformer {

enum class ErrorKind {
  kInvalidConfig,
  kExhaustedSampling,
  kShapeMismatch,
  kOutOfRange,
  kEmptySplit,
  kNumeric,
  kIo,
  kFormat,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidConfig: return "invalid-config";
    case ErrorKind::kExhaustedSampling: return "exhausted-sampling";
    case ErrorKind::kShapeMismatch: return "shape-mismatch";
    case ErrorKind::kOutOfRange: return "out-of-range";
    case ErrorKind::kEmptySplit: return "empty-split";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kFormat: return "format";
  }
  return "unknown";
}

// Every failure in the library surfaces as this exception type.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define LOOPFORMER_CHECK(cond, kind, msg)              \
  do {                                                 \
    if (!(cond)) {                                     \
      throw ::loopformer::Error((kind), (msg));        \
    }                                                  \
  } while (false)

}  // namespace loopformer
