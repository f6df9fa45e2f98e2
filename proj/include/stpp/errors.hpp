#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace stpp {

// Shapes that cannot be combined. The message carries both shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of an operation
// (empty reduction, degenerate mask, empty dataset, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Caller violated an operation's precondition (wrong prototype kind,
// non-scalar loss passed to backward, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Inconsistent model / dataset / training configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed binary or text file. offset() is the byte position at which
// decoding failed.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// A loss or parameter became NaN/Inf during optimisation.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace stpp
