#pragma once

#include <stdexcept>
#include <string>

namespace mixnoise {

/// Base for all library errors. `kind()` names the error class for CLI
/// diagnostics and exit-code mapping.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

/// Invalid configuration or argument values.
class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config"; }
};

/// Dimension or index mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "shape"; }
};

/// A finite pool (reservoir, candidate set) is too small.
class ResourceError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "resource"; }
};

/// Not enough anchor candidates to estimate a transition-matrix row.
class AnchorShortageError : public Error {
 public:
  AnchorShortageError(const std::string& what, std::size_t row)
      : Error(what), row_(row) {}
  const char* kind() const noexcept override { return "anchor-shortage"; }
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

/// A pipeline stage ran before the artifact it consumes existed.
class DependencyError : public Error {
 public:
  DependencyError(const std::string& what, std::string missing)
      : Error(what), missing_(std::move(missing)) {}
  const char* kind() const noexcept override { return "dependency"; }
  const std::string& missing() const noexcept { return missing_; }

 private:
  std::string missing_;
};

/// Training produced a non-finite loss. The payload carries the last stable
/// state so callers can recover it.
template <typename Payload>
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, Payload last_stable)
      : Error(what), last_stable_(std::move(last_stable)) {}
  const char* kind() const noexcept override { return "divergence"; }
  const Payload& last_stable() const noexcept { return last_stable_; }

 private:
  Payload last_stable_;
};

}  // namespace mixnoise
