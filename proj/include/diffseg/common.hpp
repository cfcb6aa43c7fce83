#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace diffseg {

// Invalid configuration or argument values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Problems with datasets or files on disk.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training aborted (non-finite losses, empty data, ...). Carries a
// preformatted diagnostics string.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << args);
  return oss.str();
}

}  // namespace detail

template <typename... Args>
void require(bool cond, Args&&... msg) {
  if (!cond) throw ConfigError(detail::cat(std::forward<Args>(msg)...));
}

template <typename... Args>
void require_data(bool cond, Args&&... msg) {
  if (!cond) throw DataError(detail::cat(std::forward<Args>(msg)...));
}

}  // namespace diffseg
