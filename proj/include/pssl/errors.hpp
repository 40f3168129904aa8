#pragma once

#include <stdexcept>
#include <string>

namespace pssl {

// Error categories surface on the CLI as exit codes.
enum class ErrorCategory { config, data, numeric, io, dimension, parameter };

const char* category_name(ErrorCategory c);

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& what)
        : std::runtime_error(what), category_(category) {}
    ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& w) : Error(ErrorCategory::config, w) {}
};
struct DataError : Error {
    explicit DataError(const std::string& w) : Error(ErrorCategory::data, w) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& w) : Error(ErrorCategory::numeric, w) {}
};
struct IoError : Error {
    explicit IoError(const std::string& w) : Error(ErrorCategory::io, w) {}
};
struct DimensionError : Error {
    explicit DimensionError(const std::string& w) : Error(ErrorCategory::dimension, w) {}
};
struct ParameterError : Error {
    explicit ParameterError(const std::string& w) : Error(ErrorCategory::parameter, w) {}
};

}  // namespace pssl
