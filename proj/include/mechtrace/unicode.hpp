#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace mechtrace::unicode {

// Decodes the codepoint starting at byte `pos` and advances `pos`. Bytes that
// are not valid UTF-8 decode as single-byte codepoints so that arbitrary byte
// strings still scan totally.
uint32_t next_codepoint(std::string_view s, size_t& pos);

void append_utf8(std::string& out, uint32_t cp);

bool is_letter(uint32_t cp);
bool is_number(uint32_t cp);
bool is_whitespace(uint32_t cp);

}  // namespace mechtrace::unicode
