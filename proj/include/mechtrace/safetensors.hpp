#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mechtrace/tensor.hpp"

namespace mechtrace {

// Flat binary tensor archive: little-endian u64 header length, JSON header
// mapping tensor name -> {dtype, shape, data_offsets}, then raw bytes.
class SafeTensors {
 public:
  struct Entry {
    std::string dtype;            // "F32" or "F16"
    std::vector<int64_t> shape;
    uint64_t begin = 0, end = 0;  // offsets into the payload
  };

  static SafeTensors open(const std::string& path);

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  const Entry& entry(const std::string& name) const;
  std::vector<std::string> names() const;

  // loads as f32; F16 payloads are upcast
  Tensor load(const std::string& name) const;

  const std::map<std::string, std::string>& metadata() const { return metadata_; }

 private:
  std::map<std::string, Entry> entries_;
  std::map<std::string, std::string> metadata_;
  std::vector<uint8_t> payload_;
  std::string path_;
};

void write_safetensors(const std::string& path,
                       const std::vector<std::pair<std::string, const Tensor*>>& tensors,
                       const std::map<std::string, std::string>& metadata = {});

float f16_to_f32(uint16_t h);

}  // namespace mechtrace
