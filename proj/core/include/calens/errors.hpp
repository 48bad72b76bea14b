#pragma once

#include <stdexcept>
#include <string>

namespace calens {

// Base error. `category()` is the single machine-parseable token the CLI
// prints on failure.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(message), category_(std::move(category)) {}
  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

// Caller passed arguments violating a precondition.
class InputError : public Error {
 public:
  explicit InputError(const std::string& message) : Error("input", message) {}
};

// Invalid configuration (values out of range, unknown keys, bad paths).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message) : Error("config", message) {}
};

// Linear algebra failed beyond the recovery policy (jitter cap, etc.).
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& message, double attempted_jitter = 0.0)
      : Error("numerical", message), attempted_jitter_(attempted_jitter) {}
  double attempted_jitter() const { return attempted_jitter_; }

 private:
  double attempted_jitter_;
};

// Optimization diverged or produced persistent non-finite objectives.
class InferenceError : public Error {
 public:
  explicit InferenceError(const std::string& message) : Error("inference", message) {}
};

// Malformed input file; carries a 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& message, long line = 0)
      : Error("parse", line > 0 ? message + " (line " + std::to_string(line) + ")" : message),
        line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error("io", message) {}
};

}  // namespace calens
