#pragma once

#include <filesystem>
#include <string>

#include "djpq/checkpoint.hpp"
#include "djpq/report_io.hpp"
#include "djpq/trainer.hpp"

namespace djpq {

// Default output directory: $DJPQ_OUT_DIR, else "djpq-out".
std::filesystem::path default_out_dir();

// Relative architecture paths in a config are resolved against the config
// file's directory.
std::filesystem::path resolve_arch_path(const TrainConfig& cfg, const std::filesystem::path& config_path);

struct RunArtifacts {
  std::filesystem::path checkpoint;
  std::filesystem::path report;
  std::filesystem::path history;
  std::filesystem::path manifest;
  CompressionReport report_data;
};

// Writes model.ckpt, report.<fmt>, history.jsonl and manifest.json into
// `out`. Everything except the manifest timestamps is a pure function of
// (config, dataset, seed).
RunArtifacts write_run_artifacts(const std::filesystem::path& out, const RunResult& run, const TrainConfig& cfg,
                                 const DataSplits& data, const std::string& data_path, ReportFormat format,
                                 const std::string& started_at);

Checkpoint make_checkpoint(const RunResult& run, const TrainConfig& cfg, const DataSplits& data);

// Recomputes the report of a checkpoint. With `test` the accuracy is
// re-evaluated, otherwise the stored value is used.
CompressionReport report_from_checkpoint(const Checkpoint& ckpt, const Dataset* test);

}  // namespace djpq
