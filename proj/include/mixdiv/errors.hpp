#pragma once

#include <stdexcept>
#include <string>

namespace mixdiv {

// Shape disagreement between operands of a tensor op.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A caller-side precondition was violated.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Parallel files disagree on their line counts.
struct AlignmentError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed input file; message carries the line number when known.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/Inf showed up in a loss or a parameter.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mixdiv
