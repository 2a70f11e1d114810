#pragma once

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>

namespace rdfcil {

// Raised when an operation is called on an object whose state does not allow
// it (out-of-order phases, missing snapshot, zero class counter, ...).
class invalid_state : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Configuration problems carry the offending key so the CLI can name it.
class config_error : public std::runtime_error {
 public:
  config_error(std::string key, const std::string& what)
      : std::runtime_error("config key '" + key + "': " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

template <typename... Args>
inline void require(bool ok, Args&&... msg) {
  if (!ok) throw std::invalid_argument(concat(std::forward<Args>(msg)...));
}

template <typename... Args>
inline void require_state(bool ok, Args&&... msg) {
  if (!ok) throw invalid_state(concat(std::forward<Args>(msg)...));
}

// Diverged training: stop the run instead of carrying NaN weights into the next phase.
inline void require_finite(double loss, const char* where) {
  if (!std::isfinite(loss)) throw std::runtime_error(concat(where, ": loss is not finite (", loss, ")"));
}

}  // namespace detail
}  // namespace rdfcil
