// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace sublab {

/// Base class for every error raised by the library. `kind()` is the
/// machine-readable tag used in CLI error records.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& m) : Error("shape_error", m) {}
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& m) : Error("input_error", m) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& m) : Error("contract_error", m) {}
};

class DegenerateInputError : public Error {
 public:
  explicit DegenerateInputError(const std::string& m) : Error("degenerate_input", m) {}
};

class UndefinedSimilarityError : public Error {
 public:
  explicit UndefinedSimilarityError(const std::string& m) : Error("undefined_similarity", m) {}
};

class RunError : public Error {
 public:
  explicit RunError(const std::string& m) : Error("run_error", m) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& m) : Error("format_error", m) {}
};

}  // namespace sublab
