#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "djpq/dataset.hpp"
#include "djpq/gates.hpp"
#include "djpq/network.hpp"

namespace djpq {

enum class TrainMode { kDjpq, kDjpqRestrict, kTwoStage, kFloatBaseline };

// How the second stage of the two-stage pipeline picks bit-widths.
enum class StageTwoQuant {
  kLearned,  // quantizers trained with the BOP penalty, then frozen
  kFixed8,   // 8-bit weights and activations
  kMatched,  // integer widths allocated to hit a BOP budget, then frozen
};

std::string to_string(TrainMode mode);
std::string to_string(StageTwoQuant q);

struct TrainConfig {
  std::string preset;
  TrainMode mode = TrainMode::kDjpq;
  std::string arch;  // architecture file

  double gamma = 0.0;
  double beta = 0.0;
  double lr = 0.0;
  double scale_prune = 1.0;
  double scale_quant = 1.0;
  double momentum = 0.0;
  double weight_decay = 0.0;

  int epochs = 1;           // joint (or single-phase) epochs
  int pretrain_epochs = 0;  // float epochs before gates and quantizers attach
  int batch_size = 64;
  int eval_batch_size = 250;

  double b_init_w = 6.0;
  double b_init_a = 6.0;
  double alpha_th = 1e-3;
  double tau = 1e-2;
  double gate_mu_init = 1.0;
  double gate_sigma_init = 0.5;
  SoftPruneForm sigmoid_form = SoftPruneForm::kIndicator;

  // Per-epoch multiplicative factors applied to gamma and beta.
  double gamma_anneal = 1.0;
  double beta_anneal = 1.0;

  // Two-stage pipeline.
  int stage1_epochs = 20;
  double stage1_gamma = 5e-6;
  double stage1_lr = 1e-3;
  double stage1_scale_prune = 5.0;
  int stage2_epochs = 20;
  double stage2_beta = 1e-11;
  double stage2_lr = 5e-4;
  double stage2_scale_quant = 0.05;
  StageTwoQuant stage2_quant = StageTwoQuant::kLearned;
  double stage2_target_bops = 0.0;  // required for kMatched
  double bop_tolerance = 0.05;

  std::uint64_t seed = 0;

  // Throws ConfigError naming the first invalid field.
  void validate() const;
};

// Optimizer hyper-parameter presets.
TrainConfig preset_config(const std::string& name);
std::vector<std::string> preset_names();

// ---- loss ----

// Differentiable sum over layers of (1-p_in) c_in (1-p_out) c_out m k b_w b_a
// with soft pruning ratios and surrogate bit-widths. Layers without a gate
// count as unpruned, layers without a quantizer as 32 bits.
Tensor soft_bop_total(const NetworkGraph& graph, bool restrict_pow2, SoftPruneForm form);

struct LossTerms {
  Tensor total;
  double ce = 0.0;
  double vib = 0.0;
  double bops = 0.0;
};

// CE + gamma * VIB + beta * soft BOPs. Terms with zero strength are skipped.
LossTerms djpq_loss(const Tensor& logits, std::span<const int> labels, const NetworkGraph& graph, double gamma,
                    double beta, bool restrict_pow2, SoftPruneForm form);

// ---- optimizer ----

struct ParamGroup {
  Tensor param;
  double lr_scale = 1.0;
  std::string name;
};

// SGD with optional momentum and per-group learning-rate scales. Gradients
// are cleared after every step and quantizer/gate constraints re-applied.
// A non-finite gradient raises TrainingError naming the parameter.
class Optimizer {
 public:
  Optimizer(NetworkGraph& graph, double lr, double momentum, double scale_prune, double scale_quant,
            double weight_decay = 0.0, bool train_weights = true);
  void step();
  void zero_grad();
  const std::vector<ParamGroup>& groups() const { return groups_; }
  double lr() const { return lr_; }

 private:
  NetworkGraph* graph_;
  std::vector<ParamGroup> groups_;
  std::vector<std::vector<float>> velocity_;
  std::vector<bool> decay_;
  double lr_;
  double momentum_;
  double weight_decay_;
};

// ---- training loop ----

struct LayerSnapshot {
  std::string name;
  double b_w = 32.0;
  double b_a = 32.0;
  double p = 0.0;

  bool operator==(const LayerSnapshot&) const = default;
};

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double first_batch_loss = 0.0;
  double last_batch_loss = 0.0;
  double accuracy = 0.0;  // training accuracy over the epoch
  double gamma = 0.0;
  double beta = 0.0;
  std::vector<LayerSnapshot> layers;

  bool operator==(const EpochStats&) const = default;
};

struct EpochSettings {
  double lr = 1e-3;
  int batch_size = 64;
  bool restrict_pow2 = false;
  SoftPruneForm form = SoftPruneForm::kIndicator;
};

// Strengths mutated by the anneal hook.
struct Strengths {
  double gamma = 0.0;
  double beta = 0.0;
  double gamma_anneal = 1.0;
  double beta_anneal = 1.0;

  void anneal() {
    gamma *= gamma_anneal;
    beta *= beta_anneal;
  }
};

// One pass over `data` in a shuffled order. Throws TrainingError on a
// non-finite loss or a loss above 1e4, naming the batch.
EpochStats train_epoch(NetworkGraph& graph, Optimizer& opt, const Dataset& data, const EpochSettings& settings,
                       Strengths& strengths, std::mt19937_64& rng, int epoch_index);

// Eval-mode accuracy.
// Re-estimates batch-norm running statistics as the exact average of batch
// statistics over `data`, with gates at their means.
void recalibrate_batchnorm(NetworkGraph& graph, const Dataset& data, int batch_size, bool restrict_pow2 = false);

double evaluate(NetworkGraph& graph, const Dataset& data, int batch_size = 250, bool restrict_pow2 = false);

std::vector<LayerSnapshot> layer_snapshot(const NetworkGraph& graph, bool restrict_pow2);

// Hard-prunes, freezes quantizers, evaluates and reports.
struct Exported {
  NetworkGraph graph;
  CompressionReport report;
};
Exported export_compressed(const NetworkGraph& graph, const Dataset& test, bool restrict_pow2, int eval_batch = 250);

// Skeleton of the uncompressed architecture used as the report baseline.
NetworkGraph baseline_graph(const ArchSpec& arch);

// Integer weight/activation widths in [2, 16] for every quantizer so that the
// exported BOPs land within `tolerance` of `target`. Widths are lowered one
// bit at a time, always on the widest quantizer. Returns true on a match.
bool allocate_bits(NetworkGraph& graph, double target_bops, double tolerance);

// ---- pipelines ----

struct RunResult {
  TrainMode mode = TrainMode::kDjpq;
  Exported exported;
  std::vector<EpochStats> history;
  double pretrain_accuracy = 0.0;
  double surrogate_bops = 0.0;  // soft BOP total at the end of training
};

// Float training of `graph` for cfg.pretrain_epochs (shared by every mode so
// that paired runs start from the same weights).
NetworkGraph pretrain(const ArchSpec& arch, const TrainConfig& cfg, const Dataset& train, std::vector<EpochStats>* history);

// Runs cfg.mode from a float network produced by pretrain().
RunResult run_from_pretrained(const NetworkGraph& pretrained, const TrainConfig& cfg, const DataSplits& data);

RunResult run_training(const ArchSpec& arch, const TrainConfig& cfg, const DataSplits& data);

}  // namespace djpq
