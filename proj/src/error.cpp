#include "panis/error.hpp"

namespace panis {

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

int exitCodeFor(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Domain:
    case ErrorKind::Io:
      return 2;
    case ErrorKind::NonConvergence:
      return 4;
    case ErrorKind::Mesh:
    case ErrorKind::Architecture:
    case ErrorKind::Contract:
    case ErrorKind::Numerical:
      return 3;
  }
  return 3;
}

const char* toString(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Config: return "config";
    case ErrorKind::Domain: return "domain";
    case ErrorKind::Mesh: return "mesh";
    case ErrorKind::Architecture: return "architecture";
    case ErrorKind::Contract: return "contract";
    case ErrorKind::Numerical: return "numerical";
    case ErrorKind::NonConvergence: return "non-convergence";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

}  // namespace panis
