// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace tppt {

/// Violated precondition of a public operation.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Incompatible shapes while wiring graph nodes together.
class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// NaN/Inf encountered in a forward value, gradient or loss.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& reason)
      : std::runtime_error(field + ": " + reason), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// The pretrained dual encoder failed to beat chance zero-shot accuracy.
class PretrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tppt
