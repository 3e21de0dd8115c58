#pragma once

#include <stdexcept>
#include <string>

namespace cpm {

// Caller violated an operation's precondition (shape mismatch, wrong team,
// stepping a finished episode, unknown concept name, ...).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A NaN or infinity appeared where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed serialized input. `line` is 1-based; 0 when not line oriented.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line == 0 ? what
                                     : "line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace cpm
