#pragma once

#include <stdexcept>
#include <string>

namespace geostars {

/// Violated precondition of a library call (programming error on the caller side).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed or inconsistent input data (CSV, JSON, configuration values).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite value produced during a forward or backward pass, or a diverged loss.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& op, const std::string& what)
      : std::runtime_error("numeric failure in '" + op + "': " + what), op_(op) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace geostars
