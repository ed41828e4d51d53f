#include "mechtrace/safetensors.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "mechtrace/errors.hpp"

namespace mechtrace {

float f16_to_f32(uint16_t h) {
  const uint32_t sign = static_cast<uint32_t>(h >> 15) << 31;
  uint32_t exp = (h >> 10) & 0x1F;
  uint32_t mant = h & 0x3FF;
  uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;  // +-0
    } else {
      // subnormal: renormalize
      int shift = 0;
      while (!(mant & 0x400)) {
        mant <<= 1;
        ++shift;
      }
      mant &= 0x3FF;
      bits = sign | ((112 - shift) << 23) | (mant << 13);
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000 | (mant << 13);  // inf/nan
  } else {
    bits = sign | ((exp + 112) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

SafeTensors SafeTensors::open(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open tensor archive: " + path);
  f.seekg(0, std::ios::end);
  const auto file_size = static_cast<uint64_t>(f.tellg());
  f.seekg(0);
  if (file_size < 8) throw SchemaError("tensor archive too small: " + path);

  uint64_t header_len = 0;
  f.read(reinterpret_cast<char*>(&header_len), 8);
  if constexpr (std::endian::native == std::endian::big)
    header_len = __builtin_bswap64(header_len);
  if (header_len > file_size - 8)
    throw SchemaError("tensor archive header length exceeds file size: " + path);

  std::string header(header_len, '\0');
  f.read(header.data(), static_cast<std::streamsize>(header_len));

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("tensor archive header is not valid JSON: " + std::string(e.what()));
  }

  SafeTensors st;
  st.path_ = path;
  const uint64_t payload_size = file_size - 8 - header_len;
  st.payload_.resize(payload_size);
  f.read(reinterpret_cast<char*>(st.payload_.data()),
         static_cast<std::streamsize>(payload_size));
  if (!f) throw SchemaError("tensor archive truncated: " + path);

  for (auto& [name, spec] : j.items()) {
    if (name == "__metadata__") {
      for (auto& [k, v] : spec.items())
        st.metadata_[k] = v.is_string() ? v.get<std::string>() : v.dump();
      continue;
    }
    Entry e;
    try {
      e.dtype = spec.at("dtype").get<std::string>();
      e.shape = spec.at("shape").get<std::vector<int64_t>>();
      const auto off = spec.at("data_offsets").get<std::vector<uint64_t>>();
      if (off.size() != 2) throw SchemaError("data_offsets must have 2 entries");
      e.begin = off[0];
      e.end = off[1];
    } catch (const nlohmann::json::exception& ex) {
      throw SchemaError("bad header entry for tensor '" + name + "': " + ex.what());
    }
    if (e.end < e.begin || e.end > payload_size)
      throw SchemaError("tensor '" + name + "' offsets out of range in " + path);
    const int64_t numel = Tensor::count(e.shape);
    const uint64_t elem = e.dtype == "F32" ? 4 : e.dtype == "F16" ? 2 : 0;
    if (elem != 0 && e.end - e.begin != static_cast<uint64_t>(numel) * elem)
      throw SchemaError("tensor '" + name + "' byte span does not match shape in " + path);
    st.entries_.emplace(name, std::move(e));
  }
  return st;
}

const SafeTensors::Entry& SafeTensors::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end())
    throw SchemaError("tensor archive " + path_ + " is missing tensor '" + name + "'");
  return it->second;
}

std::vector<std::string> SafeTensors::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (auto& [k, _] : entries_) out.push_back(k);
  return out;
}

Tensor SafeTensors::load(const std::string& name) const {
  const Entry& e = entry(name);
  const int64_t numel = Tensor::count(e.shape);
  Tensor t = Tensor::zeros(e.shape);
  const uint8_t* src = payload_.data() + e.begin;
  if (e.dtype == "F32") {
    std::memcpy(t.data.data(), src, static_cast<size_t>(numel) * 4);
  } else if (e.dtype == "F16") {
    for (int64_t i = 0; i < numel; ++i) {
      uint16_t h;
      std::memcpy(&h, src + i * 2, 2);
      t.data[static_cast<size_t>(i)] = f16_to_f32(h);
    }
  } else {
    throw SchemaError("tensor '" + name + "' has unsupported dtype " + e.dtype +
                      " (only F32/F16 load)");
  }
  return t;
}

void write_safetensors(const std::string& path,
                       const std::vector<std::pair<std::string, const Tensor*>>& tensors,
                       const std::map<std::string, std::string>& metadata) {
  nlohmann::json header = nlohmann::json::object();
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const uint64_t bytes = static_cast<uint64_t>(t->numel()) * 4;
    header[name] = {{"dtype", "F32"},
                    {"shape", t->shape},
                    {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  if (!metadata.empty()) {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [k, v] : metadata) m[k] = v;
    header["__metadata__"] = m;
  }
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot write tensor archive: " + path);
  uint64_t len = hs.size();
  if constexpr (std::endian::native == std::endian::big) len = __builtin_bswap64(len);
  f.write(reinterpret_cast<const char*>(&len), 8);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : tensors)
    f.write(reinterpret_cast<const char*>(t->data.data()),
            static_cast<std::streamsize>(t->numel() * 4));
  if (!f) throw InputError("short write on tensor archive: " + path);
}

}  // namespace mechtrace
