#pragma once

#include <stdexcept>
#include <string>

namespace forgetlab {

// Error categories map onto the CLI exit codes (1 usage, 2 numerical, 3 incompatibility).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UsageError : Error {
  using Error::Error;
};

struct NumericalError : Error {
  using Error::Error;
};

struct IncompatibleError : Error {
  using Error::Error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw UsageError(what);
}

}  // namespace forgetlab
