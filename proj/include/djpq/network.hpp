#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "djpq/gates.hpp"
#include "djpq/metrics.hpp"
#include "djpq/ops.hpp"
#include "djpq/quantizer.hpp"

namespace djpq {

enum class PoolKind { kNone, kMax, kGlobalAvg };

// Declarative description of one weighted layer block:
// conv|dense -> [batchnorm] -> [+ residual] -> [relu] -> [gate] -> [act quant] -> [pool]
struct LayerConfig {
  std::string name;
  LayerKind kind = LayerKind::kConv;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 0;
  bool bias = true;
  bool batchnorm = false;
  bool relu = false;
  bool gated = false;
  PoolKind pool = PoolKind::kNone;
  int pool_window = 2;
  int pool_stride = 2;
  int pool_padding = 0;
  std::string input;  // predecessor layer; empty means the previous layer
  std::string add;    // residual source added before the ReLU

  bool operator==(const LayerConfig&) const = default;
};

struct ArchSpec {
  std::string name;
  int in_channels = 1;
  int in_height = 1;
  int in_width = 1;
  int input_bits = 8;
  std::vector<LayerConfig> layers;

  bool operator==(const ArchSpec&) const = default;
};

struct Layer {
  LayerConfig cfg;

  // Inferred by infer_shapes().
  int input_index = -1;  // -1: network input
  int add_index = -1;
  std::size_t in_channels = 0;  // channels produced by the predecessor
  std::size_t in_spatial = 1;   // dense after flatten: features per input channel
  std::size_t map_h = 1, map_w = 1;
  Shape out_shape;              // per sample, after pooling

  Tensor weight;  // conv [C_out, C_in, k, k]; dense [F, G]
  Tensor bias;
  Tensor bn_gamma, bn_beta;
  BatchNormStats bn_stats;
  std::optional<TrainableQuantizer> weight_quant;
  std::optional<TrainableQuantizer> act_quant;
  int gate = -1;                       // index into NetworkGraph::gates
  std::vector<float> channel_scale;    // fixed per-channel scale left by pruning

  std::size_t out_channels() const { return static_cast<std::size_t>(cfg.out_channels); }
  std::size_t fan_in() const { return in_channels * in_spatial; }
};

struct NetworkGraph {
  ArchSpec arch;
  std::vector<Layer> layers;
  std::vector<GateState> gates;

  bool has_quantizers() const;
  bool has_gates() const { return !gates.empty(); }
  std::size_t num_classes() const;
  int find_layer(const std::string& name) const;
};

// Validates names/links and fills the inferred fields of every layer.
void infer_shapes(NetworkGraph& graph);

// Float network with He-normal weights, zero bias, unit batch-norm.
NetworkGraph build_network(const ArchSpec& arch, std::mt19937_64& rng);

// Deep copy: no tensor is shared with the source.
NetworkGraph clone_graph(const NetworkGraph& graph);

struct GateInit {
  float mu = 1.0f;
  float sigma = 0.5f;
  float alpha_th = 1e-3f;
  float tau = 1e-2f;
};

// One GateState per gated layer. A gated layer whose output is summed with a
// gated residual source shares that source's gate.
void attach_gates(NetworkGraph& graph, const GateInit& init);

struct QuantInit {
  double bits_w = 6;
  double bits_a = 6;
  double q_s_weight = kWeightDeadZone;
  double q_s_act = kActivationDeadZone;
};

// Weight quantizers on every weighted layer; activation quantizers on every
// layer that feeds another layer. q_m starts at max |w| for weights and at
// the largest activation observed on `calibration` for activations.
void attach_quantizers(NetworkGraph& graph, const QuantInit& init, const Tensor& calibration);

struct ForwardOptions {
  BnMode mode = BnMode::kEval;
  std::mt19937_64* rng = nullptr;  // required in train mode when gates exist
  bool restrict_pow2 = false;
  bool mean_gates = false;  // use z = mu even in train mode
};

// Runs the network; throws TrainingError naming the first layer whose
// output is not finite.
Tensor forward(NetworkGraph& graph, const Tensor& input, const ForwardOptions& opts);

// Per-layer activations (the tensor fed to the activation quantizer) without
// quantization, eval mode, no grad.
std::vector<Tensor> activation_trace(NetworkGraph& graph, const Tensor& input);

// Channels kept per layer output: gate keep mask, or all channels.
std::vector<bool> output_keep_mask(const NetworkGraph& graph, std::size_t layer);

// Removes channels whose gate alpha is below alpha_th. Output channels of the
// pruned layer and the matching input channels of its consumers are dropped;
// surviving gate means are folded into batch-norm affine parameters when the
// block allows it and otherwise kept as a fixed channel scale. The result has
// no gates. Throws StructuralError if a layer would lose every channel.
NetworkGraph apply_hard_pruning(const NetworkGraph& graph);

// Per-layer MAC/BOP specs of `graph` measured against the channel counts of
// `baseline`. Gated layers count their hard-pruned channels as removed.
std::vector<LayerSpec> layer_specs(const NetworkGraph& graph, const NetworkGraph& baseline, bool restrict_pow2 = false);

CompressionReport model_report(const NetworkGraph& graph, const NetworkGraph& baseline, double accuracy,
                               bool restrict_pow2 = false);

// Static audit at 32/32 bits, unpruned.
CompressionReport audit_architecture(const ArchSpec& arch);

}  // namespace djpq
