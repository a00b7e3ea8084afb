#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace divseq {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor dimensions (message names the offending shapes).
struct ShapeError : Error {
  using Error::Error;
};

// A caller violated an operation precondition.
struct ContractError : Error {
  using Error::Error;
};

// An index (e.g. token id) is outside its valid range.
struct IndexError : Error {
  using Error::Error;
};

// Invalid user-supplied input (overlong sequence, empty sentence, ...).
struct InputError : Error {
  using Error::Error;
};

// Malformed file content; carries the 1-based line number.
struct ParseError : Error {
  ParseError(const std::string& msg, std::size_t line)
      : Error(msg + " (line " + std::to_string(line) + ")"), line_number(line) {}
  std::size_t line_number;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace divseq
