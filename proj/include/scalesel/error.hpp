#pragma once

#include <stdexcept>
#include <string>

namespace scalesel {

// Root of every error thrown by the library. The CLI maps DivergenceError to
// exit code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class TruncationError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class CapacityError : public Error {
public:
    using Error::Error;
};

class UnsupportedError : public Error {
public:
    using Error::Error;
};

class InvalidActionError : public Error {
public:
    using Error::Error;
};

// Feature subsets must be non-empty: the score is only defined for s != {}.
class EmptySelectionError : public Error {
public:
    EmptySelectionError() : Error("empty feature selection: the selected subset s must satisfy s != {}") {}
    explicit EmptySelectionError(const std::string& what) : Error(what) {}
};

class LimitError : public Error {
public:
    using Error::Error;
};

class DivergenceError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace scalesel
