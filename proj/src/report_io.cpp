#include "djpq/report_io.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <json.hpp>

#include "djpq/errors.hpp"

namespace djpq {

using nlohmann::json;

namespace {

json totals_json(const MetricTotals& t) {
  return json{{"macs", t.macs}, {"bops", t.bops}, {"gmacs", format_giga(t.macs)}, {"gbops", format_giga(t.bops)}};
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

double number(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key) || !j.at(key).is_number()) {
    throw FormatError(std::string("report field '") + key + "' missing or not a number", 0);
  }
  return j.at(key).get<double>();
}

MetricTotals read_totals(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_object()) throw FormatError(std::string("report field '") + key + "' missing", 0);
  return {number(j.at(key), "macs"), number(j.at(key), "bops")};
}

}  // namespace

ReportFormat parse_report_format(const std::string& name) {
  if (name == "json") return ReportFormat::kJson;
  if (name == "csv") return ReportFormat::kCsv;
  throw ConfigError("unknown report format '" + name + "' (valid: json, csv)");
}

std::string report_to_json(const CompressionReport& r) {
  json layers = json::array();
  for (const auto& l : r.layers) {
    layers.push_back(json{{"layer_id", l.layer_id},
                          {"b_w", l.b_w},
                          {"b_a", l.b_a},
                          {"p_l", l.p_l},
                          {"P_l", l.P_l},
                          {"macs", l.macs},
                          {"bops", l.bops}});
  }
  json doc{{"schema", kReportSchema},
           {"manifest_id", r.manifest_id},
           {"accuracy", r.accuracy},
           {"layers", layers},
           {"totals", totals_json(r.totals)},
           {"baseline", totals_json(r.baseline)},
           {"ratios", json{{"mac", r.mac_ratio}, {"bop", r.bop_ratio}}}};
  return doc.dump(2) + "\n";
}

CompressionReport report_from_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("report JSON: ") + e.what(), e.byte);
  }
  if (!doc.is_object() || !doc.contains("schema") || doc.at("schema") != kReportSchema) {
    throw FormatError(std::string("report schema is not ") + kReportSchema, 0);
  }
  CompressionReport r;
  if (!doc.contains("layers") || !doc.at("layers").is_array()) throw FormatError("report has no layer array", 0);
  for (const auto& l : doc.at("layers")) {
    if (!l.is_object() || !l.contains("layer_id") || !l.at("layer_id").is_string()) {
      throw FormatError("report layer without a string layer_id", 0);
    }
    LayerRecord rec;
    rec.layer_id = l.at("layer_id").get<std::string>();
    rec.b_w = number(l, "b_w");
    rec.b_a = number(l, "b_a");
    rec.p_l = number(l, "p_l");
    rec.P_l = number(l, "P_l");
    rec.macs = number(l, "macs");
    rec.bops = number(l, "bops");
    r.layers.push_back(rec);
  }
  r.totals = read_totals(doc, "totals");
  r.baseline = read_totals(doc, "baseline");
  if (!doc.contains("ratios")) throw FormatError("report field 'ratios' missing", 0);
  r.mac_ratio = number(doc.at("ratios"), "mac");
  r.bop_ratio = number(doc.at("ratios"), "bop");
  r.accuracy = number(doc, "accuracy");
  if (!doc.contains("manifest_id") || !doc.at("manifest_id").is_string()) {
    throw FormatError("report field 'manifest_id' missing", 0);
  }
  r.manifest_id = doc.at("manifest_id").get<std::string>();
  return r;
}

std::string report_to_csv(const CompressionReport& r) {
  std::string out = "layer-id,b_w,b_a,p_l,P_l,MACs,BOPs\n";
  for (const auto& l : r.layers) {
    out += l.layer_id + "," + fixed(l.b_w, 2) + "," + fixed(l.b_a, 2) + "," + fixed(l.p_l, 4) + "," + fixed(l.P_l, 4) +
           "," + fixed(l.macs, 0) + "," + fixed(l.bops, 0) + "\n";
  }
  out += "total,,,,," + fixed(r.totals.macs, 0) + "," + fixed(r.totals.bops, 0) + "\n";
  return out;
}

std::string render_report(const CompressionReport& r, ReportFormat format) {
  return format == ReportFormat::kJson ? report_to_json(r) : report_to_csv(r);
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

void emit_report(const CompressionReport& r, ReportFormat format, const std::filesystem::path& path) {
  write_text_file(path, render_report(r, format));
}

std::string report_summary(const CompressionReport& r) {
  std::string s;
  s += "MACs: " + format_giga(r.totals.macs, 3) + " G (baseline " + format_giga(r.baseline.macs, 3) + " G, ratio " +
       fixed(r.mac_ratio, 2) + "x)\n";
  s += "BOPs: " + format_giga(r.totals.bops) + " G (baseline " + format_giga(r.baseline.bops) + " G, ratio " +
       fixed(r.bop_ratio, 2) + "x)\n";
  s += "accuracy: " + fixed(100.0 * r.accuracy, 2) + "%\n";
  return s;
}

std::string manifest_id(const std::string& config_text, const std::string& dataset_fingerprint, std::uint64_t seed) {
  const std::string key = config_text + "\n" + dataset_fingerprint + "\n" + std::to_string(seed);
  return content_hash(std::span(reinterpret_cast<const std::uint8_t*>(key.data()), key.size()));
}

std::string manifest_to_json(const RunManifest& m) {
  json doc{{"id", m.id},
           {"config", m.config_text},
           {"dataset", json{{"path", m.dataset_path}, {"fingerprint", m.dataset_fingerprint}}},
           {"normalization", json{{"mean", m.norm.mean}, {"stddev", m.norm.stddev}}},
           {"seed", m.seed},
           {"code_version", m.code_version},
           {"started_at", m.started_at},
           {"finished_at", m.finished_at},
           {"outputs", m.outputs}};
  return doc.dump(2) + "\n";
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string history_to_jsonl(const std::vector<EpochStats>& history) {
  std::string out;
  for (const auto& e : history) {
    json layers = json::array();
    for (const auto& l : e.layers) layers.push_back(json{{"layer_id", l.name}, {"b_w", l.b_w}, {"b_a", l.b_a}, {"p", l.p}});
    json row{{"epoch", e.epoch},       {"mean_loss", e.mean_loss}, {"train_accuracy", e.accuracy},
             {"gamma", e.gamma},       {"beta", e.beta},           {"layers", layers}};
    out += row.dump() + "\n";
  }
  return out;
}

}  // namespace djpq
