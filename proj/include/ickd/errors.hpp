#pragma once

#include <stdexcept>
#include <string>

namespace ickd {

// Base of every error raised by the library. kind() is a stable identifier
// used by the CLI for its one-line machine-parsable error output.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message);
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define ICKD_DECLARE_ERROR(Name)                                   \
  class Name : public Error {                                      \
   public:                                                         \
    explicit Name(const std::string& message) : Error(#Name, message) {} \
  };

ICKD_DECLARE_ERROR(ShapeError)
ICKD_DECLARE_ERROR(ConfigError)
ICKD_DECLARE_ERROR(DegenerateBatchError)
ICKD_DECLARE_ERROR(GridIndivisibleError)
ICKD_DECLARE_ERROR(FormatError)
ICKD_DECLARE_ERROR(IOError)
ICKD_DECLARE_ERROR(OracleError)
ICKD_DECLARE_ERROR(NonFiniteError)
ICKD_DECLARE_ERROR(InternalError)

#undef ICKD_DECLARE_ERROR

}  // namespace ickd
