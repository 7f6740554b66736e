#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "djpq/metrics.hpp"
#include "djpq/trainer.hpp"

namespace djpq {

enum class ReportFormat { kJson, kCsv };

ReportFormat parse_report_format(const std::string& name);

inline constexpr const char* kReportSchema = "djpq-report/1";

// JSON document:
// {
//   "schema": "djpq-report/1",
//   "manifest_id": str, "accuracy": num,
//   "layers": [{"layer_id", "b_w", "b_a", "p_l", "P_l", "macs", "bops"}],
//   "totals":   {"macs", "bops", "gmacs", "gbops"},
//   "baseline": {"macs", "bops", "gmacs", "gbops"},
//   "ratios":   {"mac", "bop"}
// }
// Numbers are written with round-trip precision; "gmacs"/"gbops" are
// 2-decimal display strings.
std::string report_to_json(const CompressionReport& report);
// Throws FormatError on malformed JSON or schema violations.
CompressionReport report_from_json(std::string_view text);

// Columns: layer-id,b_w,b_a,p_l,P_l,MACs,BOPs followed by a "total" row.
std::string report_to_csv(const CompressionReport& report);

std::string render_report(const CompressionReport& report, ReportFormat format);
// Writes the rendered report; IO failures name the path.
void emit_report(const CompressionReport& report, ReportFormat format, const std::filesystem::path& path);

// Short human-readable summary for terminals.
std::string report_summary(const CompressionReport& report);

struct RunManifest {
  std::string id;
  std::string config_text;
  std::string dataset_path;
  std::string dataset_fingerprint;
  std::uint64_t seed = 0;
  std::string code_version;
  std::string started_at;
  std::string finished_at;
  Normalization norm;
  std::vector<std::string> outputs;
};

// Hash of (config, dataset fingerprint, seed); independent of time and paths.
std::string manifest_id(const std::string& config_text, const std::string& dataset_fingerprint, std::uint64_t seed);
std::string manifest_to_json(const RunManifest& m);
std::string utc_timestamp();

// Per-epoch history as JSON lines.
std::string history_to_jsonl(const std::vector<EpochStats>& history);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace djpq
