#include "djpq/workbench.hpp"

#include <cstdlib>

#include "djpq/config.hpp"
#include "djpq/errors.hpp"

namespace djpq {

namespace fs = std::filesystem;

fs::path default_out_dir() {
  const char* env = std::getenv("DJPQ_OUT_DIR");
  return env && *env ? fs::path(env) : fs::path("djpq-out");
}

fs::path resolve_arch_path(const TrainConfig& cfg, const fs::path& config_path) {
  if (cfg.arch.empty()) throw ConfigError(config_path.string() + ": [run] arch must name an architecture file");
  fs::path p(cfg.arch);
  if (p.is_relative()) p = config_path.parent_path() / p;
  return p.lexically_normal();
}

Checkpoint make_checkpoint(const RunResult& run, const TrainConfig& cfg, const DataSplits& data) {
  Checkpoint c;
  c.graph = run.exported.graph;
  c.config_text = config_to_text(cfg);
  c.norm = data.train.norm;
  c.epoch = run.history.empty() ? 0 : run.history.back().epoch + 1;
  c.restrict_pow2 = cfg.mode == TrainMode::kDjpqRestrict;
  c.accuracy = run.exported.report.accuracy;
  c.manifest_id = manifest_id(c.config_text, data.train.fingerprint + data.test.fingerprint, cfg.seed);
  return c;
}

CompressionReport report_from_checkpoint(const Checkpoint& ckpt, const Dataset* test) {
  NetworkGraph g = clone_graph(ckpt.graph);
  double acc = ckpt.accuracy;
  if (test) {
    if (test->channels != static_cast<std::size_t>(g.arch.in_channels) ||
        test->height != static_cast<std::size_t>(g.arch.in_height) ||
        test->width != static_cast<std::size_t>(g.arch.in_width)) {
      throw DataError("dataset samples " + shape_str(test->sample_shape()) + " do not fit network input");
    }
    Dataset d = *test;
    d.norm = ckpt.norm;
    const TrainConfig cfg = parse_config(ckpt.config_text, "<checkpoint config>");
    acc = evaluate(g, d, cfg.eval_batch_size, ckpt.restrict_pow2);
  }
  CompressionReport r = model_report(g, baseline_graph(g.arch), acc, ckpt.restrict_pow2);
  r.manifest_id = ckpt.manifest_id;
  return r;
}

RunArtifacts write_run_artifacts(const fs::path& out, const RunResult& run, const TrainConfig& cfg,
                                 const DataSplits& data, const std::string& data_path, ReportFormat format,
                                 const std::string& started_at) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Error("cannot create output directory " + out.string() + ": " + ec.message());
  RunArtifacts a;
  const Checkpoint ckpt = make_checkpoint(run, cfg, data);
  a.report_data = run.exported.report;
  a.report_data.manifest_id = ckpt.manifest_id;
  a.checkpoint = out / "model.ckpt";
  a.report = out / (format == ReportFormat::kJson ? "report.json" : "report.csv");
  a.history = out / "history.jsonl";
  a.manifest = out / "manifest.json";
  save_checkpoint(ckpt, a.checkpoint);
  emit_report(a.report_data, format, a.report);
  write_text_file(a.history, history_to_jsonl(run.history));

  RunManifest m;
  m.id = ckpt.manifest_id;
  m.config_text = ckpt.config_text;
  m.dataset_path = data_path;
  m.dataset_fingerprint = data.train.fingerprint + data.test.fingerprint;
  m.seed = cfg.seed;
  m.code_version = DJPQ_VERSION;
  m.started_at = started_at;
  m.finished_at = utc_timestamp();
  m.norm = data.train.norm;
  m.outputs = {a.checkpoint.filename().string(), a.report.filename().string(), a.history.filename().string()};
  write_text_file(a.manifest, manifest_to_json(m));
  return a;
}

}  // namespace djpq
