#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace cfsim {

// Base for every error raised by the harness.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what,
                           std::vector<std::string> violations = {})
      : Error(what), violations_(std::move(violations)) {}
  const std::vector<std::string>& violations() const { return violations_; }

 private:
  std::vector<std::string> violations_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

// Ordering conflict, e.g. a precision verdict submitted before the
// simulatability verdicts for the same counterfactual.
class ConflictError : public Error {
 public:
  using Error::Error;
};

// Missing or invalid annotator session.
class AuthError : public Error {
 public:
  using Error::Error;
};

// ---- gateway ----

class TransportError : public Error {
 public:
  using Error::Error;
};

class ReplayMissError : public Error {
 public:
  explicit ReplayMissError(const std::string& key)
      : Error("replay miss: no transcript entry for key " + key), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

class EmptyResponseError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// ---- prompts ----

class RenderError : public Error {
 public:
  explicit RenderError(const std::string& placeholder)
      : Error("unbound placeholder '" + placeholder + "'"),
        placeholder_(placeholder) {}
  const std::string& placeholder() const { return placeholder_; }

 private:
  std::string placeholder_;
};

// Carries the raw model text so failures can be audited later.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::string raw)
      : Error(what), raw_(std::move(raw)) {}
  const std::string& raw() const { return raw_; }

 private:
  std::string raw_;
};

class VerdictParseError : public ParseError {
 public:
  using ParseError::ParseError;
};

// ---- metrics ----

class DomainError : public Error {
 public:
  using Error::Error;
};

class DegenerateSampleError : public Error {
 public:
  using Error::Error;
};

class IncompleteAnnotationError : public Error {
 public:
  using Error::Error;
};

class EmptyReportError : public Error {
 public:
  using Error::Error;
};

// ---- store ----

class StorageError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  LoadError(const std::string& file, std::size_t line, const std::string& why)
      : Error(file + ":" + std::to_string(line) + ": " + why),
        file_(file),
        line_(line) {}
  const std::string& file() const { return file_; }
  std::size_t line() const { return line_; }

 private:
  std::string file_;
  std::size_t line_;
};

// ---- pipeline ----

class StageError : public Error {
 public:
  using Error::Error;
};

}  // namespace cfsim
