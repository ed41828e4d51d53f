#include "mechtrace/tokenizer.hpp"

#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "mechtrace/errors.hpp"
#include "mechtrace/unicode.hpp"

namespace mechtrace {

namespace uni = unicode;

namespace {

// bytes that survive the remap unchanged: printable ascii and most of
// latin-1; everything else is shifted into 0x100+
bool printable_byte(int b) {
  return (b >= 33 && b <= 126) || (b >= 161 && b <= 172) || (b >= 174 && b <= 255);
}

const std::unordered_map<uint32_t, uint8_t>& unicode_to_byte() {
  static const auto* map = [] {
    auto* m = new std::unordered_map<uint32_t, uint8_t>();
    const auto& fwd = BpeTokenizer::byte_to_unicode();
    for (int b = 0; b < 256; ++b) (*m)[fwd[static_cast<size_t>(b)]] = static_cast<uint8_t>(b);
    return m;
  }();
  return *map;
}

}  // namespace

const std::vector<uint32_t>& BpeTokenizer::byte_to_unicode() {
  static const auto* table = [] {
    auto* t = new std::vector<uint32_t>(256);
    uint32_t next = 256;
    for (int b = 0; b < 256; ++b) {
      if (printable_byte(b))
        (*t)[static_cast<size_t>(b)] = static_cast<uint32_t>(b);
      else
        (*t)[static_cast<size_t>(b)] = next++;
    }
    return t;
  }();
  return *table;
}

BpeTokenizer BpeTokenizer::load(const std::string& vocab_json_path,
                                const std::string& merges_path) {
  std::ifstream vf(vocab_json_path, std::ios::binary);
  if (!vf) throw InputError("cannot open vocab file: " + vocab_json_path);
  nlohmann::json vocab_json;
  try {
    vf >> vocab_json;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("vocab file is not valid JSON: " + std::string(e.what()));
  }
  if (!vocab_json.is_object()) throw SchemaError("vocab file must be a JSON object");

  BpeTokenizer tok;
  int max_id = -1;
  for (auto& [token, id] : vocab_json.items()) {
    if (!id.is_number_integer()) throw SchemaError("vocab id for '" + token + "' is not an integer");
    max_id = std::max(max_id, id.get<int>());
  }
  tok.id_to_token_.resize(static_cast<size_t>(max_id + 1));
  std::vector<bool> seen(static_cast<size_t>(max_id + 1), false);
  for (auto& [token, id] : vocab_json.items()) {
    const int i = id.get<int>();
    if (i < 0 || seen[static_cast<size_t>(i)])
      throw SchemaError("vocab id " + std::to_string(i) + " duplicated or negative");
    seen[static_cast<size_t>(i)] = true;
    tok.id_to_token_[static_cast<size_t>(i)] = token;
    tok.token_to_id_.emplace(token, i);
  }
  for (size_t i = 0; i < seen.size(); ++i)
    if (!seen[i]) throw SchemaError("vocab has a hole at id " + std::to_string(i));

  std::ifstream mf(merges_path, std::ios::binary);
  if (!mf) throw InputError("cannot open merges file: " + merges_path);
  std::string line;
  bool first = true;
  int rank = 0;
  while (std::getline(mf, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (first) {
      first = false;  // "#version: ..." header
      continue;
    }
    if (line.empty()) continue;
    const size_t sp = line.find(' ');
    if (sp == std::string::npos || line.find(' ', sp + 1) != std::string::npos)
      throw SchemaError("malformed merge rule at rank " + std::to_string(rank) + ": '" + line + "'");
    tok.merge_rank_.emplace(line, rank++);
  }
  if (tok.merge_rank_.empty()) throw SchemaError("merges file has no rules: " + merges_path);
  return tok;
}

std::vector<std::pair<size_t, size_t>> BpeTokenizer::pretokenize(std::string_view text) {
  std::vector<std::pair<size_t, size_t>> out;
  const size_t n = text.size();
  size_t pos = 0;
  while (pos < n) {
    const size_t start = pos;
    size_t p = pos;
    const uint32_t cp0 = uni::next_codepoint(text, p);

    if (cp0 == '\'') {
      // 's 't 're 've 'm 'll 'd, lowercase only
      static constexpr std::string_view one[] = {"s", "t", "m", "d"};
      static constexpr std::string_view two[] = {"re", "ve", "ll"};
      size_t took = 0;
      for (auto s : two)
        if (text.substr(p).starts_with(s)) {
          took = 2;
          break;
        }
      if (!took)
        for (auto s : one)
          if (text.substr(p).starts_with(s)) {
            took = 1;
            break;
          }
      if (took) {
        pos = p + took;
        out.emplace_back(start, pos);
        continue;
      }
    }

    // " ?\p{L}+  |  ?\p{N}+  |  ?[^\s\p{L}\p{N}]+" with a literal optional space
    size_t q = pos;
    if (cp0 == ' ') q = p;  // consumed the optional space
    if (q < n) {
      size_t r = q;
      const uint32_t cp1 = uni::next_codepoint(text, r);
      if (uni::is_letter(cp1)) {
        size_t end = r;
        while (end < n) {
          size_t t = end;
          if (!uni::is_letter(uni::next_codepoint(text, t))) break;
          end = t;
        }
        pos = end;
        out.emplace_back(start, pos);
        continue;
      }
      if (uni::is_number(cp1)) {
        size_t end = r;
        while (end < n) {
          size_t t = end;
          if (!uni::is_number(uni::next_codepoint(text, t))) break;
          end = t;
        }
        pos = end;
        out.emplace_back(start, pos);
        continue;
      }
      if (!uni::is_whitespace(cp1)) {
        size_t end = r;
        while (end < n) {
          size_t t = end;
          const uint32_t c = uni::next_codepoint(text, t);
          if (uni::is_whitespace(c) || uni::is_letter(c) || uni::is_number(c)) break;
          end = t;
        }
        pos = end;
        out.emplace_back(start, pos);
        continue;
      }
    }

    // whitespace run: match all of it at end of text, otherwise leave the
    // final whitespace char for the next token ("\s+(?!\S)" then "\s+")
    size_t end = pos, last_start = pos;
    while (end < n) {
      size_t t = end;
      if (!uni::is_whitespace(uni::next_codepoint(text, t))) break;
      last_start = end;
      end = t;
    }
    if (end >= n) {
      pos = end;
    } else if (last_start > pos) {
      pos = last_start;
    } else {
      pos = end;  // single whitespace char followed by non-space
    }
    out.emplace_back(start, pos);
  }
  return out;
}

std::vector<std::string> BpeTokenizer::bpe_symbols(std::string_view pretoken_bytes) const {
  const std::string key(pretoken_bytes);
  {
    std::lock_guard<std::mutex> lock(cache_->mu);
    auto it = cache_->map.find(key);
    if (it != cache_->map.end()) return it->second;
  }

  std::vector<std::string> word;
  word.reserve(pretoken_bytes.size());
  const auto& fwd = byte_to_unicode();
  for (unsigned char b : pretoken_bytes) {
    std::string sym;
    uni::append_utf8(sym, fwd[b]);
    word.push_back(std::move(sym));
  }

  auto rank_of_pair = [&](const std::string& a, const std::string& b) {
    auto it = merge_rank_.find(a + " " + b);
    return it == merge_rank_.end() ? std::numeric_limits<int>::max() : it->second;
  };

  while (word.size() > 1) {
    int best = std::numeric_limits<int>::max();
    size_t best_i = 0;
    for (size_t i = 0; i + 1 < word.size(); ++i) {
      const int r = rank_of_pair(word[i], word[i + 1]);
      if (r < best) {
        best = r;
        best_i = i;
      }
    }
    if (best == std::numeric_limits<int>::max()) break;
    const std::string first = word[best_i], second = word[best_i + 1];
    std::vector<std::string> merged;
    merged.reserve(word.size());
    for (size_t i = 0; i < word.size();) {
      if (i + 1 < word.size() && word[i] == first && word[i + 1] == second) {
        merged.push_back(first + second);
        i += 2;
      } else {
        merged.push_back(word[i]);
        ++i;
      }
    }
    word = std::move(merged);
  }

  {
    std::lock_guard<std::mutex> lock(cache_->mu);
    cache_->map.emplace(key, word);
  }
  return word;
}

std::vector<BpeTokenizer::TokenSpan> BpeTokenizer::encode_with_offsets(
    std::string_view text) const {
  std::vector<TokenSpan> out;
  for (auto [begin, end] : pretokenize(text)) {
    const auto symbols = bpe_symbols(text.substr(begin, end - begin));
    size_t byte_pos = begin;
    for (const auto& sym : symbols) {
      auto it = token_to_id_.find(sym);
      if (it == token_to_id_.end())
        throw SchemaError("BPE produced a symbol missing from the vocab: '" + sym + "'");
      // each base codepoint of a symbol stands for exactly one input byte
      size_t cps = 0;
      for (size_t p = 0; p < sym.size();) {
        uni::next_codepoint(sym, p);
        ++cps;
      }
      out.push_back({it->second, static_cast<int>(byte_pos),
                     static_cast<int>(byte_pos + cps)});
      byte_pos += cps;
    }
  }
  return out;
}

std::vector<int> BpeTokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  for (auto [begin, end] : pretokenize(text)) {
    for (const auto& sym : bpe_symbols(text.substr(begin, end - begin))) {
      auto it = token_to_id_.find(sym);
      if (it == token_to_id_.end())
        throw SchemaError("BPE produced a symbol missing from the vocab: '" + sym + "'");
      ids.push_back(it->second);
    }
  }
  return ids;
}

std::string BpeTokenizer::decode(std::span<const int> ids) const {
  const auto& inv = unicode_to_byte();
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= vocab_size())
      throw SchemaError("decode: token id " + std::to_string(id) + " out of range");
    const std::string& tok = id_to_token_[static_cast<size_t>(id)];
    for (size_t p = 0; p < tok.size();) {
      const uint32_t cp = uni::next_codepoint(tok, p);
      auto it = inv.find(cp);
      if (it != inv.end())
        out.push_back(static_cast<char>(it->second));
      else
        uni::append_utf8(out, cp);
    }
  }
  return out;
}

bool BpeTokenizer::is_single_token(std::string_view word, bool with_leading_space) const {
  return single_token_id(word, with_leading_space) >= 0;
}

int BpeTokenizer::single_token_id(std::string_view word, bool with_leading_space) const {
  if (word.empty()) return -1;
  std::string probe;
  if (with_leading_space) probe.push_back(' ');
  probe.append(word);
  const auto ids = encode(probe);
  return ids.size() == 1 ? ids[0] : -1;
}

}  // namespace mechtrace
