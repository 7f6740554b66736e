#include <cstdio>
#include <functional>
#include <map>
#include <set>

#include "djpq/config.hpp"
#include "djpq/errors.hpp"

namespace djpq {

namespace {

struct Field {
  std::string section;
  std::string key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

Field real(const char* section, const char* key, double TrainConfig::*m) {
  return {section, key, [m, key](TrainConfig& c, const std::string& v) { c.*m = parse_double(v, key); },
          [m](const TrainConfig& c) { return fmt_double(c.*m); }};
}

Field integer(const char* section, const char* key, int TrainConfig::*m) {
  return {section, key,
          [m, key](TrainConfig& c, const std::string& v) {
            const long long x = parse_int(v, key);
            if (x < -1000000000LL || x > 1000000000LL) throw ConfigError("field '" + std::string(key) + "' out of range");
            c.*m = static_cast<int>(x);
          },
          [m](const TrainConfig& c) { return std::to_string(c.*m); }};
}

SoftPruneForm parse_form(const std::string& v) {
  if (v == "indicator") return SoftPruneForm::kIndicator;
  if (v == "literal") return SoftPruneForm::kLiteral;
  throw ConfigError("field 'sigmoid_form': '" + v + "' is not one of indicator, literal");
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"run", "preset", [](TrainConfig& c, const std::string& v) { c.preset = v; },
                 [](const TrainConfig& c) { return c.preset; }});
    f.push_back({"run", "mode", [](TrainConfig& c, const std::string& v) { c.mode = parse_mode(v); },
                 [](const TrainConfig& c) { return to_string(c.mode); }});
    f.push_back({"run", "arch", [](TrainConfig& c, const std::string& v) { c.arch = v; },
                 [](const TrainConfig& c) { return c.arch; }});
    f.push_back({"run", "seed",
                 [](TrainConfig& c, const std::string& v) {
                   const long long s = parse_int(v, "seed");
                   if (s < 0) throw ConfigError("field 'seed' must be >= 0");
                   c.seed = static_cast<std::uint64_t>(s);
                 },
                 [](const TrainConfig& c) { return std::to_string(c.seed); }});
    f.push_back(real("djpq", "gamma", &TrainConfig::gamma));
    f.push_back(real("djpq", "beta", &TrainConfig::beta));
    f.push_back(real("djpq", "lr", &TrainConfig::lr));
    f.push_back(real("djpq", "scale_prune", &TrainConfig::scale_prune));
    f.push_back(real("djpq", "scale_quant", &TrainConfig::scale_quant));
    f.push_back(real("djpq", "momentum", &TrainConfig::momentum));
    f.push_back(real("djpq", "weight_decay", &TrainConfig::weight_decay));
    f.push_back(integer("djpq", "epochs", &TrainConfig::epochs));
    f.push_back(integer("djpq", "pretrain_epochs", &TrainConfig::pretrain_epochs));
    f.push_back(integer("djpq", "batch_size", &TrainConfig::batch_size));
    f.push_back(integer("djpq", "eval_batch_size", &TrainConfig::eval_batch_size));
    f.push_back(real("djpq", "b_init_w", &TrainConfig::b_init_w));
    f.push_back(real("djpq", "b_init_a", &TrainConfig::b_init_a));
    f.push_back(real("djpq", "alpha_th", &TrainConfig::alpha_th));
    f.push_back(real("djpq", "tau", &TrainConfig::tau));
    f.push_back(real("djpq", "gate_mu_init", &TrainConfig::gate_mu_init));
    f.push_back(real("djpq", "gate_sigma_init", &TrainConfig::gate_sigma_init));
    f.push_back({"djpq", "sigmoid_form", [](TrainConfig& c, const std::string& v) { c.sigmoid_form = parse_form(v); },
                 [](const TrainConfig& c) {
                   return std::string(c.sigmoid_form == SoftPruneForm::kIndicator ? "indicator" : "literal");
                 }});
    f.push_back(real("djpq", "gamma_anneal", &TrainConfig::gamma_anneal));
    f.push_back(real("djpq", "beta_anneal", &TrainConfig::beta_anneal));
    f.push_back(integer("two_stage", "stage1_epochs", &TrainConfig::stage1_epochs));
    f.push_back(real("two_stage", "stage1_gamma", &TrainConfig::stage1_gamma));
    f.push_back(real("two_stage", "stage1_lr", &TrainConfig::stage1_lr));
    f.push_back(real("two_stage", "stage1_scale_prune", &TrainConfig::stage1_scale_prune));
    f.push_back(integer("two_stage", "stage2_epochs", &TrainConfig::stage2_epochs));
    f.push_back(real("two_stage", "stage2_beta", &TrainConfig::stage2_beta));
    f.push_back(real("two_stage", "stage2_lr", &TrainConfig::stage2_lr));
    f.push_back(real("two_stage", "stage2_scale_quant", &TrainConfig::stage2_scale_quant));
    f.push_back({"two_stage", "stage2_quant",
                 [](TrainConfig& c, const std::string& v) { c.stage2_quant = parse_stage2_quant(v); },
                 [](const TrainConfig& c) { return to_string(c.stage2_quant); }});
    f.push_back(real("two_stage", "stage2_target_bops", &TrainConfig::stage2_target_bops));
    f.push_back(real("two_stage", "bop_tolerance", &TrainConfig::bop_tolerance));
    return f;
  }();
  return table;
}

std::string valid_keys(const std::string& section) {
  std::string out;
  for (const auto& f : fields()) {
    if (f.section == section) out += (out.empty() ? "" : ", ") + f.key;
  }
  return out;
}

}  // namespace

TrainMode parse_mode(const std::string& v) {
  for (auto m : {TrainMode::kDjpq, TrainMode::kDjpqRestrict, TrainMode::kTwoStage, TrainMode::kFloatBaseline}) {
    if (to_string(m) == v) return m;
  }
  throw ConfigError("field 'mode': '" + v + "' is not one of djpq, djpq-restrict, two-stage, float-baseline");
}

StageTwoQuant parse_stage2_quant(const std::string& v) {
  for (auto q : {StageTwoQuant::kLearned, StageTwoQuant::kFixed8, StageTwoQuant::kMatched}) {
    if (to_string(q) == v) return q;
  }
  throw ConfigError("field 'stage2_quant': '" + v + "' is not one of learned, fixed8, matched");
}

TrainConfig parse_config(std::string_view text, const std::string& source) {
  const IniDocument doc = parse_ini(text, source);
  const std::set<std::string> sections{"run", "djpq", "two_stage"};
  std::map<std::string, const IniEntry*> seen;
  for (const auto& e : doc.entries) {
    const std::string where = source + ":" + std::to_string(e.line) + ": ";
    if (!sections.count(e.section)) {
      throw ConfigError(where + "unknown section [" + e.section + "] (valid: run, djpq, two_stage)");
    }
    bool known = false;
    for (const auto& f : fields()) known = known || (f.section == e.section && f.key == e.key);
    if (!known) {
      throw ConfigError(where + "unknown key '" + e.key + "' in [" + e.section + "] (valid keys: " +
                        valid_keys(e.section) + ")");
    }
    if (seen.count(e.key)) throw ConfigError(where + "duplicate key '" + e.key + "'");
    seen[e.key] = &e;
  }

  TrainConfig cfg;
  if (auto it = seen.find("preset"); it != seen.end() && !it->second->value.empty()) {
    cfg = preset_config(it->second->value);
  } else {
    std::string missing;
    for (const char* k : {"gamma", "beta", "lr"}) {
      if (!seen.count(k)) missing += (missing.empty() ? "" : ", ") + std::string(k);
    }
    if (!missing.empty()) {
      throw ConfigError(source + ": no preset given, so strengths must be explicit; missing: " + missing);
    }
  }
  for (const auto& f : fields()) {
    auto it = seen.find(f.key);
    if (it == seen.end() || f.key == "preset") continue;
    try {
      f.set(cfg, it->second->value);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(it->second->line) + ": " + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw ConfigError("config file not found: " + path.string());
  return parse_config(read_text_file(path), path.string());
}

std::string config_to_text(const TrainConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      section = f.section;
      out += (out.empty() ? "[" : "\n[") + section + "]\n";
    }
    if (f.key == "preset" && cfg.preset.empty()) continue;
    out += f.key + " = " + f.get(cfg) + "\n";
  }
  return out;
}

}  // namespace djpq
