#pragma once

#include <stdexcept>
#include <string>

namespace udsx {

enum class ErrorKind {
  Config,    // bad key, bad value, violated precondition on user input
  Shape,     // dimension mismatch between tensors
  Domain,    // lookup of an unregistered domain or layer
  Numeric,   // NaN, non-PSD statistics, Cholesky failure
  Io,        // file missing, truncated, wrong magic/version
  Protocol,  // evaluation protocol violated
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace udsx
