#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedgrec {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what)
      : std::runtime_error(file + ":" + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class EmptyDatasetError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Violations of the client/server exchange: shape mismatch, missing peers.
class ProtocolError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A checkpoint whose tensors do not fit the configured model.
class IncompatibleCheckpointError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class ContractError : public std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace fedgrec
