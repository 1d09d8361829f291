#pragma once

#include <stdexcept>
#include <string>

namespace steerx {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised for malformed or rejected run configuration; maps to exit code 2.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace steerx
