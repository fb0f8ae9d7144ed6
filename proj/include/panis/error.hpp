#pragma once

#include <stdexcept>
#include <string>

namespace panis {

enum class ErrorKind {
  Config,
  Domain,
  Mesh,
  Architecture,
  Contract,
  Numerical,
  NonConvergence,
  Io,
};

/// Base exception for every failure raised by the library. The kind selects
/// the CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Newton or training loop gave up; carries the last residual norm seen.
class NonConvergenceError : public Error {
 public:
  NonConvergenceError(const std::string& message, double lastResidual)
      : Error(ErrorKind::NonConvergence, message), lastResidual_(lastResidual) {}

  double lastResidual() const noexcept { return lastResidual_; }

 private:
  double lastResidual_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

/// 0 success, 2 config error, 3 numerical failure, 4 non-convergence.
int exitCodeFor(ErrorKind kind) noexcept;

const char* toString(ErrorKind kind) noexcept;

}  // namespace panis
