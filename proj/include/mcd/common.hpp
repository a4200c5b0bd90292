#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace mcd {

// Argument / precondition violations. Carries the failed condition text.
class InvalidArgument : public std::invalid_argument {
 public:
  explicit InvalidArgument(const std::string& msg) : std::invalid_argument(msg) {}
};

// State or I/O failures (corrupt checkpoint, non-finite loss, ...).
class RuntimeFailure : public std::runtime_error {
 public:
  explicit RuntimeFailure(const std::string& msg) : std::runtime_error(msg) {}
};

// Operation not defined for the given configuration (an argument-class error:
// the caller picked an unsupported combination, e.g. skip taps from a
// transformer backbone).
class UnsupportedOperation : public InvalidArgument {
 public:
  explicit UnsupportedOperation(const std::string& msg) : InvalidArgument(msg) {}
};

// A metric that has no defined value on the given data (e.g. average
// precision when no class has a positive example).
class UndefinedMetric : public RuntimeFailure {
 public:
  explicit UndefinedMetric(const std::string& msg) : RuntimeFailure(msg) {}
};

namespace detail {
template <typename... Args>
std::string format_msg(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}
}  // namespace detail

}  // namespace mcd

#define MCD_CHECK(cond, ...)                                                  \
  do {                                                                        \
    if (!(cond)) {                                                            \
      throw ::mcd::InvalidArgument(                                           \
          ::mcd::detail::format_msg("check failed: ", #cond, ": ",            \
                                    __VA_ARGS__));                            \
    }                                                                         \
  } while (0)

#define MCD_REQUIRE(cond, ...)                                                \
  do {                                                                        \
    if (!(cond)) {                                                            \
      throw ::mcd::RuntimeFailure(                                            \
          ::mcd::detail::format_msg(__VA_ARGS__));                            \
    }                                                                         \
  } while (0)
