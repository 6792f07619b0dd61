#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

namespace prediag {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller violated an operation's precondition.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class EncodingError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(what) {}
    IoError(const std::filesystem::path& path, const std::string& what)
        : Error(path.string() + ": " + what), path_(path) {}

    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::filesystem::path path_;
};

class PathNotFound : public IoError {
public:
    explicit PathNotFound(const std::filesystem::path& path) : IoError(path, "no such file") {}
};

class SchemaVersionError : public Error {
public:
    using Error::Error;
};

class NotFound : public Error {
public:
    using Error::Error;
};

/// Non-finite value met during numeric evaluation.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace prediag
