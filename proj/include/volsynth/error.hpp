#pragma once

#include <stdexcept>
#include <string>

namespace volsynth {

/// Base of all library errors. `category()` is the machine-readable tag the
/// CLI reports and maps onto an exit code.
class Error : public std::runtime_error {
public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}
  const std::string& category() const noexcept { return category_; }

private:
  std::string category_;
};

struct UsageError : Error {
  explicit UsageError(const std::string& w) : Error("usage", w) {}
};
struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error("dimension", w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error("numeric", w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error("data", w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config", w) {}
};
struct IntegrityError : Error {
  explicit IntegrityError(const std::string& w) : Error("integrity", w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error("io", w) {}
};

/// Thrown by iterative solvers; carries the residual reached at the cap.
class ConvergenceError : public Error {
public:
  ConvergenceError(const std::string& w, double residual)
      : Error("convergence", w), residual_(residual) {}
  double residual() const noexcept { return residual_; }

private:
  double residual_;
};

inline int exit_code_for(const std::string& category) {
  if (category == "usage") return 2;
  if (category == "config") return 3;
  if (category == "data") return 4;
  if (category == "dimension") return 5;
  if (category == "numeric") return 6;
  if (category == "convergence") return 7;
  if (category == "integrity") return 8;
  if (category == "io") return 9;
  return 1;
}

}  // namespace volsynth
