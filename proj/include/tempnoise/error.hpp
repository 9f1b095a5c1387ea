#pragma once

#include <stdexcept>
#include <string>

namespace tempnoise {

/// Invalid configuration, shapes, or input files. Maps to CLI exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Failure while running a valid configuration (divergence, I/O). Exit code 2.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Prints `message` to stderr the first time `key` is seen in this process.
void warn_once(const std::string& key, const std::string& message);

/// Prints a warning to stderr unconditionally.
void warn(const std::string& message);

}  // namespace tempnoise
