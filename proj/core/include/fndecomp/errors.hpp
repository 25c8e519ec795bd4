#ifndef FNDECOMP_ERRORS_HPP_
#define FNDECOMP_ERRORS_HPP_

#include <stdexcept>
#include <string>
#include <vector>

namespace fndecomp {

// Bad shapes, mismatched extents, invalid axes.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Matrix could not be inverted even after ridging.
class SingularMatrixError : public std::runtime_error {
 public:
  SingularMatrixError(const std::string& what, int pivot)
      : std::runtime_error(what), pivot_(pivot) {}
  int pivot() const { return pivot_; }

 private:
  int pivot_;
};

// V V^T became singular: some network rows are numerically dependent or zero.
class DegenerateNetworksError : public std::runtime_error {
 public:
  DegenerateNetworksError(const std::string& what, std::vector<int> rows)
      : std::runtime_error(what), rows_(std::move(rows)) {}
  const std::vector<int>& rows() const { return rows_; }

 private:
  std::vector<int> rows_;
};

// Malformed files, truncated payloads, version mismatches.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid configuration values or unknown keys.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// NaN/Inf reached a numeric path that requires finite values.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace fndecomp

#endif  // FNDECOMP_ERRORS_HPP_
