// Copyright 2026 The caood Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace caood {

// Shape or extent disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Class label or element index outside the valid range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Invalid argument value (empty set, too few scores, bad angle, ...).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Object is not in a state that permits the call (missing gradient, empty queue).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Operation forbidden in the current mode (e.g. re-initializing a frozen group).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Numerical failure such as a non positive definite covariance.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file. The byte offset of the failure is kept.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace caood
