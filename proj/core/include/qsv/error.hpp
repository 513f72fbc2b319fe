#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace qsv {

/// Base class for all errors raised by the library. The `kind` string is a
/// stable machine-readable tag ("shape", "io", "format", "numeric", "state").
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

namespace detail {
inline void format_parts(std::ostringstream&) {}
template <typename T, typename... Rest>
void format_parts(std::ostringstream& os, const T& head, const Rest&... rest) {
    os << head;
    format_parts(os, rest...);
}
}  // namespace detail

template <typename... Parts>
[[noreturn]] void raise(const char* kind, const Parts&... parts) {
    std::ostringstream os;
    detail::format_parts(os, parts...);
    throw Error(kind, os.str());
}

template <typename... Parts>
[[noreturn]] void raise_shape(const Parts&... parts) { raise("shape", parts...); }
template <typename... Parts>
[[noreturn]] void raise_io(const Parts&... parts) { raise("io", parts...); }
template <typename... Parts>
[[noreturn]] void raise_format(const Parts&... parts) { raise("format", parts...); }
template <typename... Parts>
[[noreturn]] void raise_numeric(const Parts&... parts) { raise("numeric", parts...); }
template <typename... Parts>
[[noreturn]] void raise_state(const Parts&... parts) { raise("state", parts...); }

}  // namespace qsv
