#pragma once

#include <stdexcept>
#include <string>

namespace txm {

// Data or runtime failure: bad files, degenerate inputs, numerical breakdown.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Caller supplied parameters outside their documented domain.
class InvalidArgument : public Error {
public:
  using Error::Error;
};

} // namespace txm
