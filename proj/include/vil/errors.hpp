#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace vil {

// Error taxonomy used across the library:
//   ShapeError   - tensor rank/extent mismatches
//   ConfigError  - invalid or inconsistent configuration values
//   DomainError  - math domain violations (e.g. log of a non-positive value)
//   NumericError - non-finite values where finite ones are required
//   UsageError   - API misuse (backward on non-scalar, double backward, ...)
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct UsageError : Error {
  using Error::Error;
};

namespace detail {

inline void msg_append(std::ostringstream&) {}

template <typename A, typename... Rest>
void msg_append(std::ostringstream& os, const A& a, const Rest&... rest) {
  os << a;
  msg_append(os, rest...);
}

}  // namespace detail

template <typename Exc = Error, typename... Args>
[[noreturn]] void fail(const Args&... args) {
  std::ostringstream os;
  detail::msg_append(os, args...);
  throw Exc(os.str());
}

template <typename Exc = Error, typename... Args>
void check(bool cond, const Args&... args) {
  if (!cond) fail<Exc>(args...);
}

}  // namespace vil
