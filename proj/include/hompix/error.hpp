#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace hompix {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A numeric argument is outside its documented domain.
class InvalidParameter : public Error {
public:
  using Error::Error;
};

/// A precondition on the shape of the input (ordering, sizes) was violated.
class ContractViolation : public Error {
public:
  using Error::Error;
};

/// Malformed file content. `offset` is the byte offset where parsing stopped.
class FormatError : public Error {
public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

private:
  std::uint64_t offset_;
};

/// Configuration validation failure. Carries every offending field path.
class ConfigError : public Error {
public:
  explicit ConfigError(std::vector<std::string> problems)
      : Error(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const noexcept { return problems_; }

private:
  static std::string join(const std::vector<std::string>& items) {
    std::string out = "invalid configuration:";
    for (const auto& p : items) out += "\n  " + p;
    return out;
  }
  std::vector<std::string> problems_;
};

/// A fit did not converge. `diagnostics` holds the parameter trace.
class FitFailure : public Error {
public:
  FitFailure(const std::string& what, std::string diagnostics)
      : Error(what), diagnostics_(std::move(diagnostics)) {}
  const std::string& diagnostics() const noexcept { return diagnostics_; }

private:
  std::string diagnostics_;
};

}  // namespace hompix
