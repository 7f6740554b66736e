#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "djpq/network.hpp"
#include "djpq/trainer.hpp"

namespace djpq {

// Minimal sectioned key = value text. '#' and ';' start comments. Sections
// may repeat; entry order is preserved.
struct IniEntry {
  std::string section;
  std::string key;
  std::string value;
  int line = 0;
  int block = 0;  // index of the section header the entry belongs to
};

struct IniDocument {
  std::string source;
  std::vector<IniEntry> entries;
};

// Throws ConfigError("<source>:<line>: ...") on malformed lines.
IniDocument parse_ini(std::string_view text, const std::string& source);
std::string read_text_file(const std::filesystem::path& path);

// Strict scalar parsers; throw ConfigError mentioning `field`.
double parse_double(const std::string& value, const std::string& field);
long long parse_int(const std::string& value, const std::string& field);
bool parse_bool(const std::string& value, const std::string& field);

TrainMode parse_mode(const std::string& value);
StageTwoQuant parse_stage2_quant(const std::string& value);

// Sections: [run], [djpq], [two_stage]. The preset named in [run] fills the
// defaults; without a preset gamma, beta and lr must all be given.
TrainConfig parse_config(std::string_view text, const std::string& source = "<config>");
TrainConfig load_config(const std::filesystem::path& path);
// Canonical text that parse_config() maps back to an equal config.
std::string config_to_text(const TrainConfig& cfg);

// Architecture files: one [network] section followed by [layer] sections.
ArchSpec parse_arch(std::string_view text, const std::string& source = "<arch>");
ArchSpec load_arch(const std::filesystem::path& path);
std::string arch_to_text(const ArchSpec& arch);

}  // namespace djpq
