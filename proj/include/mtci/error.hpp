#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mtci {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes incompatible with an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent configuration value; `field()` names the offender.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Binary container decoding failure at a known byte offset.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Text-table parse failure; rows are 1-based and count the header.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t row)
      : Error("row " + std::to_string(row) + ": " + what), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

/// Raised when a correlation coefficient is undefined (constant input).
class UndefinedCorrelation : public Error {
 public:
  using Error::Error;
};

}  // namespace mtci
