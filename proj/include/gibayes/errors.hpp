#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gibayes {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Argument outside the domain of a function (log of a negative, non-positive
// Gamma parameter, non-SPD Wishart argument, ...).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class NotPositiveDefinite : public NumericalError {
 public:
  explicit NotPositiveDefinite(std::size_t pivot)
      : NumericalError("matrix is not positive definite (pivot " + std::to_string(pivot) + ")"),
        pivot_(pivot) {}
  std::size_t pivot() const noexcept { return pivot_; }

 private:
  std::size_t pivot_;
};

struct SingularError : NumericalError {
  using NumericalError::NumericalError;
};

class IngestionError : public std::runtime_error {
 public:
  IngestionError(const std::string& what, std::size_t row, std::size_t col)
      : std::runtime_error(what + " (row " + std::to_string(row) + ", column " + std::to_string(col) + ")"),
        row_(row),
        col_(col) {}
  explicit IngestionError(const std::string& what) : std::runtime_error(what), row_(0), col_(0) {}
  std::size_t row() const noexcept { return row_; }
  std::size_t col() const noexcept { return col_; }

 private:
  std::size_t row_;
  std::size_t col_;
};

}  // namespace gibayes
