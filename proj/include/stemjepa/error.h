#pragma once

#include <stdexcept>
#include <string>

namespace stemjepa {

// Process exit codes used by the command-line tool.
enum class ExitCode : int {
    kOk = 0,
    kConfig = 2,
    kData = 3,
    kNumerical = 4,
};

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what, ExitCode code)
        : std::runtime_error(what), code_(code) {}

    ExitCode code() const noexcept { return code_; }

private:
    ExitCode code_;
};

// Invalid configuration or incompatible settings (sample rate, shapes, versions).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(what, ExitCode::kConfig) {}
};

// Malformed or missing input data.
class InputError : public Error {
public:
    explicit InputError(const std::string& what) : Error(what, ExitCode::kData) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(what, ExitCode::kData) {}
};

// Truncated or corrupted checkpoint / store file.
class CorruptionError : public Error {
public:
    explicit CorruptionError(const std::string& what) : Error(what, ExitCode::kData) {}
};

// Non-finite values, zero-norm rows, representation collapse.
class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& what) : Error(what, ExitCode::kNumerical) {}
};

}  // namespace stemjepa
