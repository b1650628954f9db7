#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace saematch {

/// Every failure raised by the library carries one of these kinds so that
/// callers (and the CLI exit-code mapping) can tell them apart without
/// parsing messages.
enum class ErrorKind {
  // shape / state / numeric
  dimension,
  state,
  domain,
  size,
  type,
  layer_mismatch,
  no_activations,
  degenerate_input,
  // container format
  io,
  bad_magic,
  unsupported_version,
  malformed_header,
  out_of_bounds,
  overlapping_tensors,
  missing_tensor,
  shape_mismatch,
  invalid_theta,
};

constexpr std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::state: return "state";
    case ErrorKind::domain: return "domain";
    case ErrorKind::size: return "size";
    case ErrorKind::type: return "type";
    case ErrorKind::layer_mismatch: return "layer_mismatch";
    case ErrorKind::no_activations: return "no_activations";
    case ErrorKind::degenerate_input: return "degenerate_input";
    case ErrorKind::io: return "io";
    case ErrorKind::bad_magic: return "bad_magic";
    case ErrorKind::unsupported_version: return "unsupported_version";
    case ErrorKind::malformed_header: return "malformed_header";
    case ErrorKind::out_of_bounds: return "out_of_bounds";
    case ErrorKind::overlapping_tensors: return "overlapping_tensors";
    case ErrorKind::missing_tensor: return "missing_tensor";
    case ErrorKind::shape_mismatch: return "shape_mismatch";
    case ErrorKind::invalid_theta: return "invalid_theta";
  }
  return "unknown";
}

/// True for kinds that describe a bad file or malformed data rather than a
/// numerical problem.
constexpr bool is_format_error(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::io:
    case ErrorKind::bad_magic:
    case ErrorKind::unsupported_version:
    case ErrorKind::malformed_header:
    case ErrorKind::out_of_bounds:
    case ErrorKind::overlapping_tensors:
    case ErrorKind::missing_tensor:
    case ErrorKind::shape_mismatch:
    case ErrorKind::dimension:
    case ErrorKind::type:
    case ErrorKind::layer_mismatch:
      return true;
    default:
      return false;
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& what) {
  if (!condition) throw Error(kind, what);
}

}  // namespace saematch
