#pragma once

#include <string>
#include <vector>

namespace djpq {

enum class LayerKind { kConv, kDense };

// Static description of one weighted layer for MAC/BOP accounting.
struct LayerSpec {
  LayerKind kind = LayerKind::kConv;
  double c_in = 1;   // input channels (flattened features for dense)
  double c_out = 1;  // output channels
  double k_w = 1, k_h = 1;
  double m_w = 1, m_h = 1;  // output feature map (before pooling)
  double b_w = 32;          // weight bit-width
  double b_a_in = 32;       // bit-width of this layer's input activations
  double p_in = 0;          // pruning ratio of the predecessor's output channels
  double p_out = 0;         // pruning ratio of this layer's output channels

  void validate() const;
};

// 1 - (1 - p_in)(1 - p_out)
double layerwise_pruning_ratio(double p_in, double p_out);
// (1-p_in) c_in (1-p_out) c_out m_w m_h k_w k_h
double mac_count(const LayerSpec& spec);
// mac_count * b_w * b_a_in
double bop_count(const LayerSpec& spec);

struct LayerRecord {
  std::string layer_id;
  double b_w = 32;
  double b_a = 32;  // bit-width of this layer's output activations
  double p_l = 0;   // output-channel pruning ratio
  double P_l = 0;   // layerwise (weight) pruning ratio
  double macs = 0;
  double bops = 0;

  bool operator==(const LayerRecord&) const = default;
};

struct MetricTotals {
  double macs = 0;
  double bops = 0;

  bool operator==(const MetricTotals&) const = default;
};

struct CompressionReport {
  std::vector<LayerRecord> layers;
  MetricTotals totals;
  MetricTotals baseline;
  double mac_ratio = 1.0;  // baseline MACs / compressed MACs
  double bop_ratio = 1.0;  // baseline BOPs / compressed BOPs
  double accuracy = 0.0;
  std::string manifest_id;

  bool operator==(const CompressionReport&) const = default;
};

// Sums per-layer values into totals and derives both ratios.
CompressionReport assemble_report(std::vector<LayerRecord> layers, MetricTotals baseline, double accuracy);

// Sum of per-layer MACs and BOPs.
MetricTotals sum_totals(const std::vector<LayerRecord>& layers);

// Fixed-point rendering of a count in units of 1e9 (e.g. 1853.44).
std::string format_giga(double value, int decimals = 2);

}  // namespace djpq
