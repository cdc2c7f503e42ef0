#pragma once

#include <stdexcept>
#include <string>

namespace mambacsr {

/// Tensor/operation shape violations (mismatched axes, bad extents).
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tape misuse: backward on non-scalar, repeated backward, mixed tapes.
class TapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Violated module invariants or preconditions (non-bijective permutation,
/// non-positive delta, p > q, ...).
class InvariantError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File-format parse failures; message carries the byte offset when known.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Filesystem-level read/write failures.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mambacsr
