#pragma once

#include <stdexcept>
#include <string>

namespace sphreg {

// Malformed input or violated precondition (CLI exit code 2).
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Iterative procedure failed to converge (CLI exit code 3).
struct ConvergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File-system or parse failure (CLI exit code 4).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Reduce an angle to [-pi, pi).
double wrap_angle(double theta);

}  // namespace sphreg
