#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace mechtrace {

// Word-vector table in the classic format: first line "count dim", then one
// entry per line/record. Text and binary siblings both load.
class EmbeddingTable {
 public:
  static EmbeddingTable load(const std::string& path);  // sniffs the format
  static EmbeddingTable load_text(const std::string& path);
  static EmbeddingTable load_binary(const std::string& path);

  int dim() const { return dim_; }
  size_t size() const { return vectors_.size(); }

  // case-preserving lookup first, case-folded fallback
  const std::vector<float>* find(const std::string& word) const;

  // cosine similarity of two words' vectors; empty when either is missing
  std::optional<float> cosine(const std::string& a, const std::string& b) const;

  void insert(const std::string& word, std::vector<float> v);

 private:
  int dim_ = 0;
  std::unordered_map<std::string, std::vector<float>> vectors_;
};

}  // namespace mechtrace
