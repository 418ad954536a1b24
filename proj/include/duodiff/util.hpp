#pragma once

// Small shared helpers: hashing, file IO, error types.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace duodiff {

// Raised for invalid user-facing configuration; the CLI maps it to exit 2.
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open file: " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  if (!f.good() && !f.eof()) throw std::runtime_error("read failed: " + p.string());
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, std::string_view content) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open file for writing: " + p.string());
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f.good()) throw std::runtime_error("write failed: " + p.string());
}

}  // namespace duodiff
