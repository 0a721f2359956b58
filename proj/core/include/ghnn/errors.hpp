#pragma once

#include <stdexcept>
#include <string>

namespace ghnn {

enum class ErrorKind { Usage, Io, Numeric, Shape, Config };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

    /// Process exit code convention: 2 usage, 3 I/O, 4 numerical failure.
    int exit_code() const {
        switch (kind_) {
            case ErrorKind::Usage:
            case ErrorKind::Config: return 2;
            case ErrorKind::Io: return 3;
            default: return 4;
        }
    }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void throw_shape(const std::string& msg) { throw Error(ErrorKind::Shape, msg); }
[[noreturn]] inline void throw_numeric(const std::string& msg) { throw Error(ErrorKind::Numeric, msg); }
[[noreturn]] inline void throw_io(const std::string& msg) { throw Error(ErrorKind::Io, msg); }
[[noreturn]] inline void throw_config(const std::string& msg) { throw Error(ErrorKind::Config, msg); }
[[noreturn]] inline void throw_usage(const std::string& msg) { throw Error(ErrorKind::Usage, msg); }

}  // namespace ghnn
