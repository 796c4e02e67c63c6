#pragma once

#include <stdexcept>
#include <string>

namespace snnconv {

enum class ErrorCode {
    InvalidArgument,
    Io,
    Format,
    Shape,
    Graph,
    Numeric,
    Unsupported,
    State,
    Internal,
};

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

} // namespace snnconv
