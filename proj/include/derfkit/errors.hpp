#pragma once

#include <stdexcept>
#include <string>

namespace derfkit {

// Base class for everything thrown by the library. The category maps 1:1
// onto the C API status codes and the CLI exit codes.
class Error : public std::runtime_error {
public:
    enum class Category {
        invalid_argument,
        shape,
        parameter,
        contract,
        not_found,
        config,
        io,
        evaluation,
        optimization,
    };

    Error(Category cat, std::string msg) : std::runtime_error(std::move(msg)), category_(cat) {}
    Category category() const noexcept { return category_; }

private:
    Category category_;
};

class ShapeError : public Error {
public:
    explicit ShapeError(std::string msg) : Error(Category::shape, std::move(msg)) {}
};

class ParameterError : public Error {
public:
    explicit ParameterError(std::string msg) : Error(Category::parameter, std::move(msg)) {}
};

class ContractError : public Error {
public:
    explicit ContractError(std::string msg) : Error(Category::contract, std::move(msg)) {}
};

class NotFoundError : public Error {
public:
    explicit NotFoundError(std::string msg) : Error(Category::not_found, std::move(msg)) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(std::string msg) : Error(Category::config, std::move(msg)) {}
};

class IoError : public Error {
public:
    explicit IoError(std::string msg) : Error(Category::io, std::move(msg)) {}
};

class EvaluationError : public Error {
public:
    explicit EvaluationError(std::string msg) : Error(Category::evaluation, std::move(msg)) {}
};

class OptimizationError : public Error {
public:
    explicit OptimizationError(std::string msg) : Error(Category::optimization, std::move(msg)) {}
};

} // namespace derfkit
