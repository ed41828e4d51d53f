#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mechtrace {

// Byte-level BPE encoder/decoder compatible with the published GPT-2
// vocabulary (vocab.json) and merge rules (merges.txt). Immutable after
// load; encode/decode are reentrant.
class BpeTokenizer {
 public:
  static BpeTokenizer load(const std::string& vocab_json_path,
                           const std::string& merges_path);

  std::vector<int> encode(std::string_view text) const;

  // token ids plus the byte range [begin, end) each token covers in `text`
  struct TokenSpan {
    int id;
    int begin, end;
  };
  std::vector<TokenSpan> encode_with_offsets(std::string_view text) const;

  std::string decode(std::span<const int> ids) const;

  // true iff the word (with a leading space unless disabled) encodes to a
  // single token
  bool is_single_token(std::string_view word, bool with_leading_space = true) const;

  // id for a single-token word, or -1 when it does not encode to one token
  int single_token_id(std::string_view word, bool with_leading_space = true) const;

  int vocab_size() const { return static_cast<int>(id_to_token_.size()); }
  const std::string& token_string(int id) const { return id_to_token_.at(static_cast<size_t>(id)); }

  // pre-tokenizer split, exposed for tests: byte ranges of each pretoken
  static std::vector<std::pair<size_t, size_t>> pretokenize(std::string_view text);

  // the fixed 256-entry byte <-> unicode remapping of byte-level BPE
  static const std::vector<uint32_t>& byte_to_unicode();

 private:
  BpeTokenizer() = default;

  std::vector<std::string> bpe_symbols(std::string_view pretoken_bytes) const;

  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> merge_rank_;  // "left right" -> rank

  struct Cache {
    std::mutex mu;
    std::unordered_map<std::string, std::vector<std::string>> map;
  };
  std::shared_ptr<Cache> cache_ = std::make_shared<Cache>();
};

}  // namespace mechtrace
