#pragma once

#include <iostream>
#include <stdexcept>
#include <string>

namespace costa {

// Error code + human message. The code is a stable identifier callers can
// match on; the message carries context (doc id, line, tensor name).
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(code + ": " + message), code_(std::move(code)) {}
    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

// Logs go to stderr; stdout is reserved for data.
inline void log_warn(const std::string& msg) { std::cerr << "[warn] " << msg << std::endl; }
inline void log_info(const std::string& msg) { std::cerr << "[info] " << msg << std::endl; }

}  // namespace costa
