#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace sim {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when a forward op produces NaN/Inf; the trainer treats this
// specially (debug checkpoint before aborting).
class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(const std::string& msg) : Error(msg) {}
};

void warn(const std::string& msg);

}  // namespace sim

#define SIM_CHECK(cond, msg)                  \
  do {                                        \
    if (!(cond)) {                            \
      std::ostringstream oss_;                \
      oss_ << msg;                            \
      throw ::sim::Error(oss_.str());         \
    }                                         \
  } while (0)

#define SIM_CHECK_FINITE(cond, msg)           \
  do {                                        \
    if (!(cond)) {                            \
      std::ostringstream oss_;                \
      oss_ << msg;                            \
      throw ::sim::NonFiniteError(oss_.str()); \
    }                                         \
  } while (0)
