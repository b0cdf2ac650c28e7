#pragma once

#include <stdexcept>
#include <string>

namespace decorseg {

using real = double;

/// Invalid configuration or argument; maps to CLI exit code 2.
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Problem with input data (files, shapes, contents); maps to CLI exit code 3.
class DataError : public std::runtime_error {
public:
  enum class Code {
    kUnreadableFile,
    kMissingMask,
    kShapeMismatch,
    kNonBinaryMask,
    kBadManifest,
    kTooFewVolumes,
    kBadCheckpoint,
  };

  DataError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}

  Code code() const { return code_; }

private:
  Code code_;
};

/// Non-finite values or other numerical breakdown; maps to CLI exit code 4.
class NumericalError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

}  // namespace decorseg
