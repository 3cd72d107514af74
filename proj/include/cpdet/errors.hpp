#pragma once

#include <stdexcept>
#include <string>

namespace cpdet {

// Error taxonomy used across the library. Shape/contract violations are bugs
// in the caller, numeric-domain errors are bad data, state errors are
// missing preconditions (e.g. no base checkpoint loaded).

struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& msg) : std::invalid_argument("shape error: " + msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

struct ContractError : std::logic_error {
  explicit ContractError(const std::string& msg) : std::logic_error("contract error: " + msg) {}
};

struct InputError : std::invalid_argument {
  explicit InputError(const std::string& msg) : std::invalid_argument("input error: " + msg) {}
};

struct StateError : std::runtime_error {
  explicit StateError(const std::string& msg) : std::runtime_error("state error: " + msg) {}
};

struct GenerationError : std::runtime_error {
  explicit GenerationError(const std::string& msg) : std::runtime_error("generation error: " + msg) {}
};

}  // namespace cpdet
