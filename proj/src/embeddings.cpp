#include "mechtrace/embeddings.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mechtrace/errors.hpp"

namespace mechtrace {

namespace {

std::string fold_case(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::pair<long, int> read_header(std::istream& f, const std::string& path) {
  std::string line;
  if (!std::getline(f, line))
    throw SchemaError("embedding table has no header line: " + path);
  std::istringstream hs(line);
  long count = 0;
  int dim = 0;
  if (!(hs >> count >> dim) || count <= 0 || dim <= 0)
    throw SchemaError("embedding table header must be 'count dim': " + path);
  return {count, dim};
}

}  // namespace

void EmbeddingTable::insert(const std::string& word, std::vector<float> v) {
  if (dim_ == 0) dim_ = static_cast<int>(v.size());
  if (static_cast<int>(v.size()) != dim_)
    throw SchemaError("embedding for '" + word + "' has dimension " +
                      std::to_string(v.size()) + ", table is " + std::to_string(dim_));
  vectors_[word] = std::move(v);
}

EmbeddingTable EmbeddingTable::load_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open embedding table: " + path);
  auto [count, dim] = read_header(f, path);
  EmbeddingTable t;
  t.dim_ = dim;
  std::string line;
  long loaded = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    std::vector<float> v(static_cast<size_t>(dim));
    for (int i = 0; i < dim; ++i)
      if (!(ls >> v[static_cast<size_t>(i)]))
        throw SchemaError("short embedding row for '" + word + "' in " + path);
    t.vectors_[word] = std::move(v);
    ++loaded;
  }
  if (loaded != count)
    throw SchemaError("embedding table declares " + std::to_string(count) +
                      " entries but has " + std::to_string(loaded) + ": " + path);
  return t;
}

EmbeddingTable EmbeddingTable::load_binary(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open embedding table: " + path);
  auto [count, dim] = read_header(f, path);
  EmbeddingTable t;
  t.dim_ = dim;
  for (long i = 0; i < count; ++i) {
    std::string word;
    char c;
    while (f.get(c)) {
      if (c == ' ') break;
      if (c != '\n') word.push_back(c);  // tolerate leading newlines
    }
    if (!f) throw SchemaError("embedding table truncated at entry " + std::to_string(i));
    std::vector<float> v(static_cast<size_t>(dim));
    f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(dim * 4));
    if (!f) throw SchemaError("embedding vector truncated for '" + word + "'");
    t.vectors_[word] = std::move(v);
  }
  return t;
}

EmbeddingTable EmbeddingTable::load(const std::string& path) {
  // binary records pack raw floats right after the word, so a text file is
  // one whose second line is pure printable text
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open embedding table: " + path);
  std::string header, second;
  std::getline(f, header);
  std::getline(f, second);
  const size_t probe = std::min<size_t>(second.size(), 256);
  bool binary = false;
  for (size_t i = 0; i < probe; ++i) {
    const auto ch = static_cast<unsigned char>(second[i]);
    if (ch != '\t' && (ch < 0x20 || ch == 0x7F)) {
      binary = true;
      break;
    }
  }
  return binary ? load_binary(path) : load_text(path);
}

const std::vector<float>* EmbeddingTable::find(const std::string& word) const {
  auto it = vectors_.find(word);
  if (it != vectors_.end()) return &it->second;
  it = vectors_.find(fold_case(word));
  if (it != vectors_.end()) return &it->second;
  return nullptr;
}

std::optional<float> EmbeddingTable::cosine(const std::string& a, const std::string& b) const {
  const auto* va = find(a);
  const auto* vb = find(b);
  if (!va || !vb) return std::nullopt;
  double num = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < va->size(); ++i) {
    num += static_cast<double>((*va)[i]) * (*vb)[i];
    na += static_cast<double>((*va)[i]) * (*va)[i];
    nb += static_cast<double>((*vb)[i]) * (*vb)[i];
  }
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  return static_cast<float>(num / (std::sqrt(na) * std::sqrt(nb)));
}

}  // namespace mechtrace
