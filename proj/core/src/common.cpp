#include "xdial/common.hpp"

#include <iostream>
#include <map>
#include <mutex>
#include <set>

namespace xdial {
namespace diag {

namespace {
std::mutex g_mutex;
std::map<std::string, std::atomic<std::int64_t>>& registry() {
  static std::map<std::string, std::atomic<std::int64_t>> r;
  return r;
}
std::set<std::string>& warned() {
  static std::set<std::string> w;
  return w;
}
}  // namespace

std::atomic<std::int64_t>& counter(const std::string& name) {
  std::lock_guard<std::mutex> lock(g_mutex);
  return registry()[name];
}

void warn(const std::string& name, const std::string& message) {
  bool first = false;
  {
    std::lock_guard<std::mutex> lock(g_mutex);
    registry()[name]++;
    first = warned().insert(name).second;
  }
  if (first) std::cerr << "[xdial] warning: " << message << "\n";
}

}  // namespace diag

std::uint64_t fnv1a64(const void* bytes, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace xdial
