#pragma once

#include <stdexcept>
#include <string>

namespace maskfuse {

// Base for every error raised by the library. Subclasses name the failure
// category so callers (and the CLI) can report it without string matching.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class StructuralError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class PreconditionError : public Error {
public:
    using Error::Error;
};

// The oracle found no support sequence consistent with the visible tokens.
class InconsistencyError : public Error {
public:
    using Error::Error;
};

class CapabilityError : public Error {
public:
    using Error::Error;
};

enum class FormatErrorKind {
    Io,
    MagicMismatch,
    VersionMismatch,
    Truncated,
    VocabMismatch,
    SpecMismatch,
    InvalidContent,
};

class FormatError : public Error {
public:
    FormatError(FormatErrorKind kind, const std::string & what) : Error(what), kind_(kind) {}

    FormatErrorKind kind() const noexcept { return kind_; }

private:
    FormatErrorKind kind_;
};

} // namespace maskfuse
