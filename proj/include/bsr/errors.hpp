// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace bsr {

/// Base class for every error raised by the engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or extent mismatch.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A backward rule asked for a buffer its node never kept.
class RetentionViolation : public Error {
 public:
  using Error::Error;
};

/// Invalid trainable/drop plan, or an operation the plan makes impossible.
class PlanError : public Error {
 public:
  using Error::Error;
};

/// A closure that was expected to be deterministic returned different values.
class DeterminismError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API contract (e.g. a gradient for a frozen parameter).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Predicted and measured activation bytes disagree.
class AuditFailure : public Error {
 public:
  using Error::Error;
};

/// Malformed checkpoint, plan, config or CSV input.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace bsr
