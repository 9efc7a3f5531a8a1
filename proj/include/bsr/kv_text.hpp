// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace bsr {

/// Parses `key = value` lines. Blank lines and lines starting with '#' are
/// skipped; duplicate keys and lines without '=' raise FormatError.
std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view text);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, std::string_view text);

std::size_t parse_count(std::string_view key, std::string_view value);
double parse_number(std::string_view key, std::string_view value);
bool parse_bool(std::string_view key, std::string_view value);
/// Comma-separated non-negative integers; an empty value yields an empty list.
std::vector<std::size_t> parse_index_list(std::string_view key, std::string_view value);

}  // namespace bsr
