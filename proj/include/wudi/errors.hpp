#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace wudi {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Cholesky factorization hit a non-positive pivot.
class SingularityError : public Error {
public:
    SingularityError(const std::string& what, std::size_t pivot)
        : Error(what), pivot_(pivot) {}

    std::size_t pivot() const noexcept { return pivot_; }

private:
    std::size_t pivot_;
};

/// Zero-norm vector, empty sample set or empty subset where a non-degenerate one is required.
class DegenerateError : public Error {
public:
    DegenerateError(const std::string& what, std::size_t index = 0)
        : Error(what), index_(index) {}

    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

/// Malformed checkpoint header.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// Checkpoint contents are inconsistent (missing tensor, bad offsets, truncated data).
class IntegrityError : public Error {
public:
    using Error::Error;
};

/// A value that must be finite is not.
class NonFiniteError : public Error {
public:
    NonFiniteError(const std::string& what, std::string tensor, std::size_t index)
        : Error(what), tensor_(std::move(tensor)), index_(index) {}

    const std::string& tensor() const noexcept { return tensor_; }
    std::size_t index() const noexcept { return index_; }

private:
    std::string tensor_;
    std::size_t index_;
};

/// An iterative procedure produced a non-finite loss.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, std::size_t iteration)
        : Error(what), iteration_(iteration) {}

    std::size_t iteration() const noexcept { return iteration_; }

private:
    std::size_t iteration_;
};

/// Configuration value outside its documented range.
class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace wudi
