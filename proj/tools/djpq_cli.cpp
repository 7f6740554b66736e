// Command-line front end: train, report, audit, compare.
#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <json.hpp>
#include <optional>

#include "djpq/config.hpp"
#include "djpq/errors.hpp"
#include "djpq/workbench.hpp"

namespace fs = std::filesystem;
using namespace djpq;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;

struct Options {
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string format = "json";
  std::string target;  // positional: checkpoint or architecture file
};

fs::path out_dir(const Options& o) { return o.out.empty() ? default_out_dir() : fs::path(o.out); }

TrainConfig load_run_config(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config is required");
  TrainConfig cfg = load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  return cfg;
}

DataSplits load_data(const Options& o) {
  if (o.data.empty()) throw ConfigError("--data is required");
  return load_splits(o.data, detect_format(o.data));
}

void check_input_shape(const ArchSpec& arch, const DataSplits& d) {
  if (d.train.channels != static_cast<std::size_t>(arch.in_channels) ||
      d.train.height != static_cast<std::size_t>(arch.in_height) ||
      d.train.width != static_cast<std::size_t>(arch.in_width)) {
    throw DataError("dataset samples " + shape_str(d.train.sample_shape()) + " do not match the input of '" +
                    arch.name + "'");
  }
}

void print_table(const CompressionReport& r) {
  std::printf("%-10s %6s %6s %7s %7s %14s %18s\n", "layer", "b_w", "b_a", "p_l", "P_l", "MACs", "BOPs");
  for (const auto& l : r.layers) {
    std::printf("%-10s %6.2f %6.2f %7.4f %7.4f %14.0f %18.0f\n", l.layer_id.c_str(), l.b_w, l.b_a, l.p_l, l.P_l,
                l.macs, l.bops);
  }
  std::printf("%s", report_summary(r).c_str());
}

int cmd_train(const Options& o) {
  TrainConfig cfg = load_run_config(o);
  const ReportFormat fmt = parse_report_format(o.format);
  const ArchSpec arch = load_arch(resolve_arch_path(cfg, o.config));
  const DataSplits data = load_data(o);
  check_input_shape(arch, data);
  const std::string started = utc_timestamp();
  std::printf("training %s (%s) on %zu samples, seed %llu\n", arch.name.c_str(), to_string(cfg.mode).c_str(),
              data.train.size(), static_cast<unsigned long long>(cfg.seed));
  const RunResult run = run_training(arch, cfg, data);
  for (const auto& e : run.history) {
    std::printf("epoch %2d  loss %.4f  train acc %.4f\n", e.epoch, e.mean_loss, e.accuracy);
  }
  const RunArtifacts a = write_run_artifacts(out_dir(o), run, cfg, data, o.data, fmt, started);
  print_table(a.report_data);
  std::printf("wrote %s, %s\n", a.checkpoint.string().c_str(), a.report.string().c_str());
  return kOk;
}

int cmd_report(const Options& o) {
  if (o.target.empty()) throw ConfigError("report needs a checkpoint path");
  if (!fs::is_regular_file(o.target)) throw ConfigError("checkpoint not found: " + o.target);
  const ReportFormat fmt = parse_report_format(o.format);
  const Checkpoint ckpt = load_checkpoint(o.target);
  std::optional<DataSplits> data;
  if (!o.data.empty()) data = load_data(o);
  const CompressionReport r = report_from_checkpoint(ckpt, data ? &data->test : nullptr);
  const std::string text = render_report(r, fmt);
  if (o.out.empty()) {
    std::cout << text;
  } else {
    fs::create_directories(o.out);
    const fs::path p = fs::path(o.out) / (fmt == ReportFormat::kJson ? "report.json" : "report.csv");
    write_text_file(p, text);
    std::printf("wrote %s\n", p.string().c_str());
  }
  return kOk;
}

int cmd_audit(const Options& o) {
  if (o.target.empty()) throw ConfigError("audit needs an architecture file");
  const ReportFormat fmt = parse_report_format(o.format);
  const ArchSpec arch = load_arch(o.target);
  const CompressionReport r = audit_architecture(arch);
  if (o.out.empty()) {
    print_table(r);
    std::printf("total: %s GMACs, %s GBOPs\n", format_giga(r.totals.macs, 3).c_str(), format_giga(r.totals.bops).c_str());
  } else {
    fs::create_directories(o.out);
    const fs::path p = fs::path(o.out) / (fmt == ReportFormat::kJson ? "audit.json" : "audit.csv");
    emit_report(r, fmt, p);
    std::printf("wrote %s\n", p.string().c_str());
  }
  return kOk;
}

int cmd_compare(const Options& o) {
  TrainConfig cfg = load_run_config(o);
  const ArchSpec arch = load_arch(resolve_arch_path(cfg, o.config));
  const DataSplits data = load_data(o);
  check_input_shape(arch, data);

  const NetworkGraph pre = pretrain(arch, cfg, data.train, nullptr);
  TrainConfig joint = cfg;
  joint.mode = TrainMode::kDjpq;
  const RunResult dj = run_from_pretrained(pre, joint, data);
  TrainConfig two = cfg;
  two.mode = TrainMode::kTwoStage;
  two.stage2_quant = StageTwoQuant::kMatched;
  two.stage2_target_bops = dj.exported.report.totals.bops;
  const RunResult ts = run_from_pretrained(pre, two, data);
  TrainConfig fl = cfg;
  fl.mode = TrainMode::kFloatBaseline;
  const RunResult fb = run_from_pretrained(pre, fl, data);

  auto row = [](const RunResult& r) {
    return nlohmann::json{{"mode", to_string(r.mode)},
                          {"accuracy", r.exported.report.accuracy},
                          {"bops", r.exported.report.totals.bops},
                          {"bop_ratio", r.exported.report.bop_ratio},
                          {"mac_ratio", r.exported.report.mac_ratio}};
  };
  nlohmann::json doc{{"seed", cfg.seed}, {"runs", {row(dj), row(ts), row(fb)}}};
  const double gap = ts.exported.report.totals.bops / dj.exported.report.totals.bops - 1.0;
  doc["bop_mismatch"] = gap;
  for (const auto* r : {&dj, &ts, &fb}) {
    std::printf("%-15s acc %6.2f%%  GBOPs %9s  BOP ratio %7.2fx\n", to_string(r->mode).c_str(),
                100.0 * r->exported.report.accuracy, format_giga(r->exported.report.totals.bops).c_str(),
                r->exported.report.bop_ratio);
  }
  std::printf("two-stage BOPs differ from djpq by %+.2f%%\n", 100.0 * gap);
  const fs::path dir = out_dir(o);
  fs::create_directories(dir);
  write_text_file(dir / "compare.json", doc.dump(2) + "\n");
  std::printf("wrote %s\n", (dir / "compare.json").string().c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint channel pruning and mixed-precision quantization workbench"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub, bool config) {
    if (config) sub->add_option("--config", o.config, "run configuration file");
    sub->add_option("--data", o.data, "dataset directory (MNIST IDX or CIFAR-10 binary)");
    sub->add_option("--out", o.out, "output directory (default: $DJPQ_OUT_DIR or ./djpq-out)");
    sub->add_option("--seed", o.seed, "override the configured seed");
    sub->add_option("--format", o.format, "report format: json or csv");
  };
  auto* train = app.add_subcommand("train", "train one mode from a config");
  add_common(train, true);
  auto* report = app.add_subcommand("report", "recompute the report of a checkpoint");
  add_common(report, false);
  report->add_option("checkpoint", o.target, "checkpoint file")->required();
  auto* audit = app.add_subcommand("audit", "static MAC/BOP audit of an architecture file");
  add_common(audit, false);
  audit->add_option("arch", o.target, "architecture file")->required();
  auto* compare = app.add_subcommand("compare", "paired djpq / two-stage / float runs");
  add_common(compare, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kValidation;
  }

  try {
    if (*train) return cmd_train(o);
    if (*report) return cmd_report(o);
    if (*audit) return cmd_audit(o);
    if (*compare) return cmd_compare(o);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return kRuntime;
  }
  return kValidation;
}
