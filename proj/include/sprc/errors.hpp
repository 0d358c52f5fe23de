#pragma once

#include <cstdio>
#include <functional>
#include <stdexcept>
#include <string>

namespace sprc {

/// Base class for all library errors. Each subclass maps to one failure
/// family so callers (and the CLI exit-code table) can dispatch on type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class VocabularyError : public Error { using Error::Error; };
class ReferentialError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class LengthError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class StructuralError : public Error { using Error::Error; };
class DomainError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what, long step = -1)
      : Error(step >= 0 ? "step " + std::to_string(step) + ": " + what : what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

/// Warnings go through a replaceable sink (stderr by default) so tests can
/// observe them.
inline std::function<void(const std::string&)>& warning_sink() {
  static std::function<void(const std::string&)> sink = [](const std::string& msg) {
    std::fprintf(stderr, "warning: %s\n", msg.c_str());
  };
  return sink;
}

inline void warn(const std::string& msg) { warning_sink()(msg); }

}  // namespace sprc
