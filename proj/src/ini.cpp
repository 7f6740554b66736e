#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "djpq/config.hpp"
#include "djpq/errors.hpp"

namespace djpq {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool valid_name(std::string_view s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) return false;
  }
  return true;
}

}  // namespace

IniDocument parse_ini(std::string_view text, const std::string& source) {
  IniDocument doc;
  doc.source = source;
  std::string section;
  int block = -1;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    if (raw.find('\0') != std::string_view::npos) throw ConfigError(where + "NUL byte in text");
    const std::size_t hash = raw.find_first_of("#;");
    std::string_view line = trim(raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      std::string_view name = trim(line.substr(1, line.size() - 2));
      if (!valid_name(name)) throw ConfigError(where + "invalid section name '" + std::string(name) + "'");
      section = name;
      ++block;
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected 'key = value'");
    std::string_view key = trim(line.substr(0, eq));
    std::string_view value = trim(line.substr(eq + 1));
    if (!valid_name(key)) throw ConfigError(where + "invalid key '" + std::string(key) + "'");
    if (section.empty()) throw ConfigError(where + "key '" + std::string(key) + "' outside any section");
    doc.entries.push_back({section, std::string(key), std::string(value), line_no, block});
  }
  return doc;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

double parse_double(const std::string& value, const std::string& field) {
  double v = 0.0;
  const char* first = value.data();
  const char* last = value.data() + value.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw ConfigError("field '" + field + "': '" + value + "' is not a finite number");
  }
  return v;
}

long long parse_int(const std::string& value, const std::string& field) {
  long long v = 0;
  const char* first = value.data();
  const char* last = value.data() + value.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) throw ConfigError("field '" + field + "': '" + value + "' is not an integer");
  return v;
}

bool parse_bool(const std::string& value, const std::string& field) {
  if (value == "true" || value == "yes" || value == "1") return true;
  if (value == "false" || value == "no" || value == "0") return false;
  throw ConfigError("field '" + field + "': '" + value + "' is not a boolean (true/false)");
}

}  // namespace djpq
