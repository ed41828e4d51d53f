#include "mechtrace/unicode.hpp"

#include <algorithm>

namespace mechtrace::unicode {

namespace {

struct CodepointRange {
  uint32_t lo, hi;
};

#include "unicode_tables.inc"

template <size_t N>
bool in_ranges(const CodepointRange (&table)[N], uint32_t cp) {
  auto it = std::upper_bound(table, table + N, cp,
                             [](uint32_t v, const CodepointRange& r) { return v < r.lo; });
  if (it == table) return false;
  --it;
  return cp >= it->lo && cp <= it->hi;
}

}  // namespace

uint32_t next_codepoint(std::string_view s, size_t& pos) {
  const auto b0 = static_cast<unsigned char>(s[pos]);
  if (b0 < 0x80) {
    ++pos;
    return b0;
  }
  auto cont = [&](size_t i) {
    return pos + i < s.size() &&
           (static_cast<unsigned char>(s[pos + i]) & 0xC0) == 0x80;
  };
  auto cb = [&](size_t i) { return static_cast<uint32_t>(s[pos + i]) & 0x3F; };
  if ((b0 & 0xE0) == 0xC0 && cont(1)) {
    const uint32_t cp = (static_cast<uint32_t>(b0 & 0x1F) << 6) | cb(1);
    if (cp >= 0x80) {
      pos += 2;
      return cp;
    }
  } else if ((b0 & 0xF0) == 0xE0 && cont(1) && cont(2)) {
    const uint32_t cp =
        (static_cast<uint32_t>(b0 & 0x0F) << 12) | (cb(1) << 6) | cb(2);
    if (cp >= 0x800 && !(cp >= 0xD800 && cp <= 0xDFFF)) {
      pos += 3;
      return cp;
    }
  } else if ((b0 & 0xF8) == 0xF0 && cont(1) && cont(2) && cont(3)) {
    const uint32_t cp = (static_cast<uint32_t>(b0 & 0x07) << 18) | (cb(1) << 12) |
                        (cb(2) << 6) | cb(3);
    if (cp >= 0x10000 && cp <= 0x10FFFF) {
      pos += 4;
      return cp;
    }
  }
  // invalid byte: treat as a lone latin-1 codepoint
  ++pos;
  return b0;
}

void append_utf8(std::string& out, uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

bool is_letter(uint32_t cp) { return in_ranges(kLetterRanges, cp); }
bool is_number(uint32_t cp) { return in_ranges(kNumberRanges, cp); }
bool is_whitespace(uint32_t cp) { return in_ranges(kWhitespaceRanges, cp); }

}  // namespace mechtrace::unicode
