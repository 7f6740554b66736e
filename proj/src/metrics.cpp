#include "djpq/metrics.hpp"

#include <cstdio>

#include "djpq/errors.hpp"

namespace djpq {

namespace {
void require_ratio(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw ContractError(std::string(name) + " must lie in [0, 1], got " + std::to_string(p));
}
}  // namespace

void LayerSpec::validate() const {
  for (double v : {c_in, c_out, k_w, k_h, m_w, m_h}) {
    if (!(v > 0.0)) throw ContractError("layer spec: channel, kernel and map sizes must be positive");
  }
  if (!(b_w > 0.0) || !(b_a_in > 0.0)) throw ContractError("layer spec: bit-widths must be positive");
  require_ratio(p_in, "p_in");
  require_ratio(p_out, "p_out");
}

double layerwise_pruning_ratio(double p_in, double p_out) {
  require_ratio(p_in, "p_in");
  require_ratio(p_out, "p_out");
  return 1.0 - (1.0 - p_in) * (1.0 - p_out);
}

double mac_count(const LayerSpec& spec) {
  spec.validate();
  return (1.0 - spec.p_in) * spec.c_in * (1.0 - spec.p_out) * spec.c_out * spec.m_w * spec.m_h * spec.k_w * spec.k_h;
}

double bop_count(const LayerSpec& spec) { return mac_count(spec) * spec.b_w * spec.b_a_in; }

MetricTotals sum_totals(const std::vector<LayerRecord>& layers) {
  MetricTotals t;
  for (const auto& l : layers) {
    t.macs += l.macs;
    t.bops += l.bops;
  }
  return t;
}

CompressionReport assemble_report(std::vector<LayerRecord> layers, MetricTotals baseline, double accuracy) {
  CompressionReport r;
  r.layers = std::move(layers);
  r.totals = sum_totals(r.layers);
  r.baseline = baseline;
  if (!(r.totals.macs > 0.0) || !(r.totals.bops > 0.0)) {
    throw StructuralError("compressed model has no MACs; every layer was pruned away");
  }
  r.mac_ratio = baseline.macs / r.totals.macs;
  r.bop_ratio = baseline.bops / r.totals.bops;
  r.accuracy = accuracy;
  return r;
}

std::string format_giga(double value, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, value / 1e9);
  return buf;
}

}  // namespace djpq
