#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lidarsfm {

// Base type for all pipeline errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Rotation angle at or beyond the log-map singularity.
class SingularityError : public Error {
 public:
  explicit SingularityError(const std::string& what) : Error(what) {}
};

// Point behind the camera (non-positive depth).
class CheiralityError : public Error {
 public:
  explicit CheiralityError(const std::string& what) : Error(what) {}
};

// Geometrically degenerate input (parallel rays, collinear points, ...).
class DegenerateError : public Error {
 public:
  explicit DegenerateError(const std::string& what) : Error(what) {}
};

// Inconsistent in-memory data (descriptor length mismatch, bad ids, ...).
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(what) {}
};

// Malformed file content. Carries the byte offset of the failure.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t byte_offset)
      : Error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}

  std::size_t byte_offset() const { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

}  // namespace lidarsfm
