#pragma once

#include <map>
#include <string>

namespace mrn {

/// Plain-text key=value files: one pair per line, '#' starts a comment,
/// whitespace around keys and values is trimmed.
std::map<std::string, std::string> read_kv_file(const std::string& path);
std::map<std::string, std::string> parse_kv(const std::string& text);
void write_kv_file(const std::map<std::string, std::string>& kv, const std::string& path);

}  // namespace mrn
