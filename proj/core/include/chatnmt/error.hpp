#pragma once

#include <stdexcept>
#include <string>

namespace chatnmt {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor extents do not conform; message names both shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A documented precondition of an operation was violated.
class ContractError : public Error {
public:
    using Error::Error;
};

/// Numerically undefined result (softmax over empty axis, zero-norm cosine).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Malformed input file; carries the offending line number.
class ParseError : public Error {
public:
    ParseError(const std::string& msg, long line)
        : Error(msg + " (line " + std::to_string(line) + ")"), line_(line) {}
    long line() const { return line_; }

private:
    long line_;
};

/// Data fails corpus/config validation (bad role id, index overflow).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Invalid or unusable configuration (empty tokenizer corpus, bad flag combo).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Training-time failure; carries the name of the offending parameter.
class TrainError : public Error {
public:
    TrainError(const std::string& msg, std::string param)
        : Error(msg + " [parameter: " + param + "]"), param_(std::move(param)) {}
    const std::string& parameter() const { return param_; }

private:
    std::string param_;
};

/// Checkpoint or resource could not be loaded against the requested config.
class LoadError : public Error {
public:
    using Error::Error;
};

}  // namespace chatnmt
