#pragma once

#include <stdexcept>
#include <string>

namespace pegg {

// Depth sample that cannot be back-projected (<= 0 or non-finite).
class InvalidDepthError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed annotation or file content.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or plane dimensions that do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint that does not match the requested network configuration.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Sample that cannot be turned into network input (e.g. no valid depth).
class InvalidSampleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NoGraspError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pegg
