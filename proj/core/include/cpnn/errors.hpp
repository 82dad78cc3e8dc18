#ifndef CPNN_ERRORS_HPP
#define CPNN_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace cpnn {

/// Malformed or inconsistent input data (files, ids, shapes of user inputs).
/// The CLI maps this to exit code 2.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite losses, invalid distribution parameters, failed gradient
/// checks. The CLI maps this to exit code 3.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cpnn

#endif
