#pragma once

#include <stdexcept>
#include <string>

namespace rvox {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem / format failures. The CLI maps these to exit code 3.
struct IoError : Error {
  using Error::Error;
};

// Contract violations (bad shapes, invalid parameters, ...). CLI exit code 4.
struct DomainError : Error {
  using Error::Error;
};

}  // namespace rvox
