#include "tempnoise/error.hpp"

#include <iostream>
#include <mutex>
#include <set>

namespace tempnoise {

namespace {
std::mutex warn_mutex;
std::set<std::string>& seen_keys() {
  static std::set<std::string> keys;
  return keys;
}
}  // namespace

void warn_once(const std::string& key, const std::string& message) {
  std::lock_guard lock(warn_mutex);
  if (seen_keys().insert(key).second) std::cerr << "warning: " << message << '\n';
}

void warn(const std::string& message) {
  std::lock_guard lock(warn_mutex);
  std::cerr << "warning: " << message << '\n';
}

}  // namespace tempnoise
