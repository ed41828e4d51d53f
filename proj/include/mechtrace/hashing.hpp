#pragma once

#include <cstdint>
#include <span>
#include <string>

namespace mechtrace {

// SHA-256 (FIPS 180-4); used for run-manifest provenance hashes
class Sha256 {
 public:
  Sha256();
  void update(const void* data, size_t len);
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::string hex_digest();  // finalizes

  static std::string of_string(std::string_view s);
  static std::string of_file(const std::string& path);

 private:
  void process_block(const uint8_t* block);
  uint32_t h_[8];
  uint8_t buf_[64];
  size_t buf_len_ = 0;
  uint64_t total_ = 0;
};

}  // namespace mechtrace
