#pragma once

#include <stdexcept>
#include <string>

namespace aal {

// Root of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

// Dataset root missing, unreadable or empty.
class LoadError : public Error {
public:
    using Error::Error;
};

// Data present but inconsistent with the expected layout (wrong counts, corrupt files).
class IntegrityError : public Error {
public:
    using Error::Error;
};

class SamplingError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

// Non-finite loss or gradient.
class NumericalError : public Error {
public:
    using Error::Error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) {
        throw ValidationError(what);
    }
}

}  // namespace aal
