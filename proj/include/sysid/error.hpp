#pragma once

#include <stdexcept>
#include <string>

namespace sysid {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Malformed file layout (CSV header, checkpoint, config).
class SchemaError : public Error {
  public:
    using Error::Error;
};

/// Time stamps that do not lie on a uniform grid.
class GridError : public Error {
  public:
    using Error::Error;
};

/// Bad data values; carries the offending data row when known.
class DataError : public Error {
  public:
    DataError(const std::string& what, long row = -1) : Error(what), row_(row) {}
    [[nodiscard]] long row() const noexcept { return row_; }

  private:
    long row_;
};

class ParameterError : public Error {
  public:
    using Error::Error;
};

class TooShortError : public Error {
  public:
    using Error::Error;
};

class ShapeError : public Error {
  public:
    using Error::Error;
};

class LookupError : public Error {
  public:
    using Error::Error;
};

/// A state or stage became non-finite; `index` is a step or sample index.
class DivergenceError : public Error {
  public:
    DivergenceError(const std::string& what, long index = -1) : Error(what), index_(index) {}
    [[nodiscard]] long index() const noexcept { return index_; }

  private:
    long index_;
};

/// Adaptive integration gave up; `reached` is the last accepted time.
class NonConvergenceError : public Error {
  public:
    NonConvergenceError(const std::string& what, double reached) : Error(what), reached_(reached) {}
    [[nodiscard]] double reached() const noexcept { return reached_; }

  private:
    double reached_;
};

}  // namespace sysid
