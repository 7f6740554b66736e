#include "djpq/network.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "djpq/errors.hpp"

namespace djpq {

namespace {

Tensor clone_or_empty(const Tensor& t) { return t.defined() ? t.clone() : Tensor(); }

std::optional<TrainableQuantizer> clone_quant(const std::optional<TrainableQuantizer>& q) {
  if (!q) return std::nullopt;
  TrainableQuantizer c = *q;
  c.d = clone_or_empty(q->d);
  c.q_m = clone_or_empty(q->q_m);
  c.t = clone_or_empty(q->t);
  return c;
}

std::size_t count_true(const std::vector<bool>& v) { return static_cast<std::size_t>(std::count(v.begin(), v.end(), true)); }

// Keeps the entries of `values` (grouped in blocks of `block`) whose mask bit is set.
std::vector<float> select(std::span<const float> values, const std::vector<bool>& keep, std::size_t block = 1) {
  std::vector<float> out;
  out.reserve(values.size());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (!keep[i]) continue;
    out.insert(out.end(), values.begin() + static_cast<std::ptrdiff_t>(i * block),
               values.begin() + static_cast<std::ptrdiff_t>((i + 1) * block));
  }
  return out;
}

Tensor select_tensor(const Tensor& t, const std::vector<bool>& keep) {
  return Tensor(Shape{count_true(keep)}, select(t.data(), keep), t.requires_grad());
}

Tensor forward_impl(NetworkGraph& graph, const Tensor& input, const ForwardOptions& opts, bool quantize,
                    std::vector<Tensor>* trace) {
  const auto& a = graph.arch;
  if (input.rank() != 4 || input.dim(1) != static_cast<std::size_t>(a.in_channels) ||
      input.dim(2) != static_cast<std::size_t>(a.in_height) || input.dim(3) != static_cast<std::size_t>(a.in_width)) {
    throw DimensionError("network '" + a.name + "' expects input [N," + std::to_string(a.in_channels) + "," +
                         std::to_string(a.in_height) + "," + std::to_string(a.in_width) + "], got " +
                         shape_str(input.shape()));
  }
  const bool train = opts.mode == BnMode::kTrain;
  const bool noisy = train && !opts.mean_gates;
  if (noisy && graph.has_gates() && opts.rng == nullptr) {
    throw ContractError("forward: train mode with gates needs an rng");
  }
  std::mt19937_64 unused_rng(0);
  std::vector<Tensor> outs(graph.layers.size());
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    Layer& layer = graph.layers[i];
    Tensor x = layer.input_index < 0 ? input : outs[static_cast<std::size_t>(layer.input_index)];
    if (layer.cfg.kind == LayerKind::kDense && x.rank() != 2) x = x.reshape(Shape{x.dim(0), x.numel() / x.dim(0)});

    Tensor w = layer.weight;
    if (quantize && layer.weight_quant) {
      w = fake_quantize(w, *layer.weight_quant, layer.weight_quant->forward_state(opts.restrict_pow2));
    }
    Tensor y = layer.cfg.kind == LayerKind::kConv ? conv2d(x, w, layer.bias, layer.cfg.stride, layer.cfg.padding)
                                                  : dense(x, w, layer.bias);
    if (layer.cfg.batchnorm) y = batchnorm2d(y, layer.bn_gamma, layer.bn_beta, layer.bn_stats, opts.mode);
    if (layer.add_index >= 0) y = add(y, outs[static_cast<std::size_t>(layer.add_index)]);
    if (layer.cfg.relu) y = relu(y);
    if (layer.gate >= 0) {
      auto& g = graph.gates[static_cast<std::size_t>(layer.gate)];
      auto z = sample_gates(g, noisy ? *opts.rng : unused_rng, noisy ? GateMode::kTrain : GateMode::kEval);
      y = gate_forward(y, z.z);
    }
    if (!layer.channel_scale.empty()) {
      y = gate_forward(y, Tensor(Shape{layer.channel_scale.size()}, layer.channel_scale));
    }
    if (trace) (*trace)[i] = y;
    if (quantize && layer.act_quant) {
      y = fake_quantize(y, *layer.act_quant, layer.act_quant->forward_state(opts.restrict_pow2));
    }
    if (layer.cfg.pool == PoolKind::kMax) {
      y = maxpool2d(y, layer.cfg.pool_window, layer.cfg.pool_stride, layer.cfg.pool_padding);
    } else if (layer.cfg.pool == PoolKind::kGlobalAvg) {
      y = global_avgpool(y);
    }
    try {
      y.check_finite("layer output");
    } catch (const DataError& e) {
      throw TrainingError("non-finite activation produced by layer '" + layer.cfg.name + "': " + e.what());
    }
    outs[i] = y;
  }
  return outs.back();
}

}  // namespace

bool NetworkGraph::has_quantizers() const {
  return std::any_of(layers.begin(), layers.end(),
                     [](const Layer& l) { return l.weight_quant.has_value() || l.act_quant.has_value(); });
}

std::size_t NetworkGraph::num_classes() const {
  if (layers.empty()) throw StructuralError("network has no layers");
  return layers.back().out_channels();
}

int NetworkGraph::find_layer(const std::string& name) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].cfg.name == name) return static_cast<int>(i);
  }
  return -1;
}

void infer_shapes(NetworkGraph& graph) {
  if (graph.layers.empty()) throw StructuralError("network '" + graph.arch.name + "' has no layers");
  const auto& a = graph.arch;
  if (a.in_channels < 1 || a.in_height < 1 || a.in_width < 1) {
    throw StructuralError("network '" + a.name + "' has a non-positive input shape");
  }
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    Layer& layer = graph.layers[i];
    const auto& c = layer.cfg;
    const std::string where = "layer '" + c.name + "'";
    if (c.name.empty()) throw StructuralError("layer " + std::to_string(i) + " has no name");
    if (index.count(c.name)) throw StructuralError("duplicate layer name '" + c.name + "'");
    if (c.out_channels < 1) throw StructuralError(where + ": out channels must be positive");

    if (c.input.empty()) {
      layer.input_index = static_cast<int>(i) - 1;
    } else {
      auto it = index.find(c.input);
      if (it == index.end()) throw StructuralError(where + ": input '" + c.input + "' is not an earlier layer");
      layer.input_index = it->second;
    }
    const Shape in_shape = layer.input_index < 0
                               ? Shape{static_cast<std::size_t>(a.in_channels), static_cast<std::size_t>(a.in_height),
                                       static_cast<std::size_t>(a.in_width)}
                               : graph.layers[static_cast<std::size_t>(layer.input_index)].out_shape;
    layer.in_channels = in_shape[0];
    if (c.kind == LayerKind::kConv) {
      if (in_shape.size() != 3) throw StructuralError(where + ": convolution needs a spatial input");
      if (c.kernel < 1 || c.stride < 1 || c.padding < 0) throw StructuralError(where + ": bad kernel/stride/padding");
      const long oh = (static_cast<long>(in_shape[1]) + 2 * c.padding - c.kernel) / c.stride + 1;
      const long ow = (static_cast<long>(in_shape[2]) + 2 * c.padding - c.kernel) / c.stride + 1;
      if (static_cast<long>(in_shape[1]) + 2 * c.padding < c.kernel || oh < 1 || ow < 1) {
        throw StructuralError(where + ": kernel larger than input " + shape_str(in_shape));
      }
      layer.in_spatial = 1;
      layer.map_h = static_cast<std::size_t>(oh);
      layer.map_w = static_cast<std::size_t>(ow);
    } else {
      layer.in_spatial = shape_numel(in_shape) / in_shape[0];
      layer.map_h = layer.map_w = 1;
    }

    if (layer.weight.defined()) {
      const Shape expect = c.kind == LayerKind::kConv
                               ? Shape{layer.out_channels(), layer.in_channels, static_cast<std::size_t>(c.kernel),
                                       static_cast<std::size_t>(c.kernel)}
                               : Shape{layer.fan_in(), layer.out_channels()};
      if (layer.weight.shape() != expect) {
        throw DimensionError(where + ": weight " + shape_str(layer.weight.shape()) + " does not match " +
                             shape_str(expect));
      }
    }

    const Shape pre_pool = c.kind == LayerKind::kConv ? Shape{layer.out_channels(), layer.map_h, layer.map_w}
                                                      : Shape{layer.out_channels()};
    if (c.add.empty()) {
      layer.add_index = -1;
    } else {
      auto it = index.find(c.add);
      if (it == index.end()) throw StructuralError(where + ": residual source '" + c.add + "' is not an earlier layer");
      layer.add_index = it->second;
      const auto& src = graph.layers[static_cast<std::size_t>(it->second)];
      if (src.out_shape != pre_pool) {
        throw StructuralError(where + ": residual source '" + c.add + "' has shape " + shape_str(src.out_shape) +
                              ", expected " + shape_str(pre_pool));
      }
    }

    switch (c.pool) {
      case PoolKind::kNone:
        layer.out_shape = pre_pool;
        break;
      case PoolKind::kMax: {
        if (c.kind != LayerKind::kConv) throw StructuralError(where + ": pooling needs a spatial output");
        if (c.pool_window < 1 || c.pool_stride < 1 || c.pool_padding < 0 || c.pool_padding >= c.pool_window) {
          throw StructuralError(where + ": bad pooling window/stride/padding");
        }
        const long ph = (static_cast<long>(layer.map_h) + 2 * c.pool_padding - c.pool_window) / c.pool_stride + 1;
        const long pw = (static_cast<long>(layer.map_w) + 2 * c.pool_padding - c.pool_window) / c.pool_stride + 1;
        if (ph < 1 || pw < 1 || static_cast<long>(layer.map_h) + 2 * c.pool_padding < c.pool_window) {
          throw StructuralError(where + ": pooling window larger than feature map");
        }
        layer.out_shape = Shape{layer.out_channels(), static_cast<std::size_t>(ph), static_cast<std::size_t>(pw)};
        break;
      }
      case PoolKind::kGlobalAvg:
        if (c.kind != LayerKind::kConv) throw StructuralError(where + ": pooling needs a spatial output");
        layer.out_shape = Shape{layer.out_channels()};
        break;
    }
    index[c.name] = static_cast<int>(i);
  }
  if (graph.layers.back().cfg.gated) {
    throw StructuralError("output layer '" + graph.layers.back().cfg.name + "' cannot be gated");
  }
}

NetworkGraph build_network(const ArchSpec& arch, std::mt19937_64& rng) {
  NetworkGraph g;
  g.arch = arch;
  for (const auto& c : arch.layers) {
    Layer l;
    l.cfg = c;
    g.layers.push_back(std::move(l));
  }
  infer_shapes(g);
  for (auto& l : g.layers) {
    const std::size_t cout = l.out_channels();
    const bool conv = l.cfg.kind == LayerKind::kConv;
    const std::size_t k = static_cast<std::size_t>(l.cfg.kernel);
    const Shape wshape = conv ? Shape{cout, l.in_channels, k, k} : Shape{l.fan_in(), cout};
    const double fan_in = conv ? static_cast<double>(l.in_channels * k * k) : static_cast<double>(l.fan_in());
    std::normal_distribution<float> normal(0.0f, static_cast<float>(std::sqrt(2.0 / fan_in)));
    std::vector<float> w(shape_numel(wshape));
    for (auto& v : w) v = normal(rng);
    l.weight = Tensor(wshape, std::move(w), true);
    if (l.cfg.bias) l.bias = Tensor(Shape{cout}, 0.0f, true);
    if (l.cfg.batchnorm) {
      l.bn_gamma = Tensor(Shape{cout}, 1.0f, true);
      l.bn_beta = Tensor(Shape{cout}, 0.0f, true);
      l.bn_stats = BatchNormStats(cout);
    }
  }
  return g;
}

NetworkGraph clone_graph(const NetworkGraph& graph) {
  NetworkGraph g = graph;
  for (auto& l : g.layers) {
    l.weight = clone_or_empty(l.weight);
    l.bias = clone_or_empty(l.bias);
    l.bn_gamma = clone_or_empty(l.bn_gamma);
    l.bn_beta = clone_or_empty(l.bn_beta);
    l.weight_quant = clone_quant(l.weight_quant);
    l.act_quant = clone_quant(l.act_quant);
  }
  for (auto& gate : g.gates) {
    gate.mu = gate.mu.clone();
    gate.sigma = gate.sigma.clone();
  }
  return g;
}

void attach_gates(NetworkGraph& graph, const GateInit& init) {
  graph.gates.clear();
  for (auto& l : graph.layers) {
    l.gate = -1;
    if (!l.cfg.gated) continue;
    if (l.add_index >= 0) {
      const auto& src = graph.layers[static_cast<std::size_t>(l.add_index)];
      if (src.gate >= 0) {
        l.gate = src.gate;
        continue;
      }
    }
    graph.gates.push_back(GateState::make(l.out_channels(), init.mu, init.sigma, init.alpha_th, init.tau));
    l.gate = static_cast<int>(graph.gates.size()) - 1;
  }
}

void attach_quantizers(NetworkGraph& graph, const QuantInit& init, const Tensor& calibration) {
  auto trace = activation_trace(graph, calibration);
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    auto& l = graph.layers[i];
    double max_abs = 0.0;
    for (float v : l.weight.data()) max_abs = std::max(max_abs, static_cast<double>(std::abs(v)));
    l.weight_quant = TrainableQuantizer::for_weights(max_abs, init.bits_w, init.q_s_weight);
    if (i + 1 == graph.layers.size()) {
      l.act_quant.reset();
      continue;
    }
    double max_act = 0.0;
    for (float v : trace[i].data()) max_act = std::max(max_act, static_cast<double>(l.cfg.relu ? v : std::abs(v)));
    auto aq = TrainableQuantizer::for_activations(max_act, init.bits_a, init.q_s_act);
    if (!l.cfg.relu) {
      // Signed grid for activations that can be negative; t stays fixed at 1.
      aq.is_signed = true;
      QuantizerState s = aq.state();
      s.is_signed = true;
      s.d = step_for_bits(s, init.bits_a);
      aq.load_state(s);
    }
    l.act_quant = aq;
  }
}

Tensor forward(NetworkGraph& graph, const Tensor& input, const ForwardOptions& opts) {
  return forward_impl(graph, input, opts, true, nullptr);
}

std::vector<Tensor> activation_trace(NetworkGraph& graph, const Tensor& input) {
  NoGradGuard guard;
  std::vector<Tensor> trace(graph.layers.size());
  ForwardOptions opts;
  opts.mode = BnMode::kEval;
  forward_impl(graph, input, opts, false, &trace);
  return trace;
}

std::vector<bool> output_keep_mask(const NetworkGraph& graph, std::size_t layer) {
  const auto& l = graph.layers.at(layer);
  if (l.gate < 0) return std::vector<bool>(l.out_channels(), true);
  return graph.gates[static_cast<std::size_t>(l.gate)].keep_mask();
}

NetworkGraph apply_hard_pruning(const NetworkGraph& graph) {
  NetworkGraph out = clone_graph(graph);
  const std::size_t n = graph.layers.size();
  std::vector<std::vector<bool>> keep(n);
  for (std::size_t i = 0; i < n; ++i) {
    keep[i] = output_keep_mask(graph, i);
    if (count_true(keep[i]) == 0) {
      throw StructuralError("pruning removes every channel of layer '" + graph.layers[i].cfg.name + "'");
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const Layer& src = graph.layers[i];
    if (src.add_index >= 0 && keep[i] != keep[static_cast<std::size_t>(src.add_index)]) {
      throw StructuralError("layer '" + src.cfg.name + "' and its residual source '" + src.cfg.add +
                            "' would keep different channels");
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    const Layer& src = graph.layers[i];
    Layer& dst = out.layers[i];
    const auto& out_keep = keep[i];
    const std::vector<bool> in_keep =
        src.input_index < 0 ? std::vector<bool>(src.in_channels, true) : keep[static_cast<std::size_t>(src.input_index)];
    const std::size_t kept_out = count_true(out_keep);
    const std::size_t kept_in = count_true(in_keep);

    auto w = src.weight.data();
    std::vector<float> nw;
    Shape nshape;
    if (src.cfg.kind == LayerKind::kConv) {
      const std::size_t cin = src.in_channels;
      const std::size_t kk = static_cast<std::size_t>(src.cfg.kernel * src.cfg.kernel);
      for (std::size_t co = 0; co < src.out_channels(); ++co) {
        if (!out_keep[co]) continue;
        auto row = w.subspan(co * cin * kk, cin * kk);
        auto sel = select(row, in_keep, kk);
        nw.insert(nw.end(), sel.begin(), sel.end());
      }
      nshape = Shape{kept_out, kept_in, static_cast<std::size_t>(src.cfg.kernel), static_cast<std::size_t>(src.cfg.kernel)};
    } else {
      const std::size_t cout = src.out_channels();
      for (std::size_t f = 0; f < src.fan_in(); ++f) {
        if (!in_keep[f / src.in_spatial]) continue;
        auto sel = select(w.subspan(f * cout, cout), out_keep);
        nw.insert(nw.end(), sel.begin(), sel.end());
      }
      nshape = Shape{kept_in * src.in_spatial, kept_out};
    }
    dst.weight = Tensor(nshape, std::move(nw), src.weight.requires_grad());
    if (src.bias.defined()) dst.bias = select_tensor(src.bias, out_keep);
    if (src.cfg.batchnorm) {
      dst.bn_gamma = select_tensor(src.bn_gamma, out_keep);
      dst.bn_beta = select_tensor(src.bn_beta, out_keep);
      dst.bn_stats.running_mean = select(src.bn_stats.running_mean, out_keep);
      dst.bn_stats.running_var = select(src.bn_stats.running_var, out_keep);
    }
    if (!src.channel_scale.empty()) dst.channel_scale = select(src.channel_scale, out_keep);

    if (src.gate >= 0) {
      const auto mu = select(graph.gates[static_cast<std::size_t>(src.gate)].mu.data(), out_keep);
      const bool nonneg = std::all_of(mu.begin(), mu.end(), [](float m) { return m >= 0.0f; });
      const bool foldable = src.cfg.batchnorm && src.add_index < 0 && (!src.cfg.relu || nonneg);
      if (foldable) {
        auto gm = dst.bn_gamma.data();
        auto bt = dst.bn_beta.data();
        for (std::size_t c = 0; c < mu.size(); ++c) {
          gm[c] *= mu[c];
          bt[c] *= mu[c];
        }
      } else if (dst.channel_scale.empty()) {
        dst.channel_scale = mu;
      } else {
        for (std::size_t c = 0; c < mu.size(); ++c) dst.channel_scale[c] *= mu[c];
      }
    }
    dst.gate = -1;
    dst.cfg.out_channels = static_cast<int>(kept_out);
    dst.cfg.gated = false;
  }
  out.gates.clear();
  infer_shapes(out);
  return out;
}

std::vector<LayerSpec> layer_specs(const NetworkGraph& graph, const NetworkGraph& baseline, bool restrict_pow2) {
  if (graph.layers.size() != baseline.layers.size()) {
    throw StructuralError("graphs are not aligned: " + std::to_string(graph.layers.size()) + " vs " +
                          std::to_string(baseline.layers.size()) + " layers");
  }
  const bool quantized = graph.has_quantizers();
  std::vector<LayerSpec> specs;
  std::vector<double> p_out(graph.layers.size(), 0.0);
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const Layer& l = graph.layers[i];
    const Layer& b = baseline.layers[i];
    if (l.cfg.name != b.cfg.name || l.cfg.kind != b.cfg.kind || l.input_index != b.input_index) {
      throw StructuralError("graphs are not aligned at layer " + std::to_string(i) + " ('" + l.cfg.name + "' vs '" +
                            b.cfg.name + "')");
    }
    const double kept = static_cast<double>(count_true(output_keep_mask(graph, i)));
    const double base_out = static_cast<double>(b.out_channels());
    if (kept > base_out) {
      throw StructuralError("layer '" + l.cfg.name + "' has more channels than its baseline");
    }
    p_out[i] = 1.0 - kept / base_out;

    LayerSpec s;
    s.kind = b.cfg.kind;
    s.c_in = static_cast<double>(b.fan_in());
    s.c_out = base_out;
    s.k_w = s.k_h = b.cfg.kind == LayerKind::kConv ? b.cfg.kernel : 1;
    s.m_w = static_cast<double>(b.map_w);
    s.m_h = static_cast<double>(b.map_h);
    s.p_out = p_out[i];
    s.b_w = l.weight_quant ? l.weight_quant->bits(restrict_pow2) : 32.0;
    if (l.input_index < 0) {
      s.p_in = 0.0;
      s.b_a_in = quantized ? graph.arch.input_bits : 32.0;
    } else {
      const auto pred = static_cast<std::size_t>(l.input_index);
      s.p_in = p_out[pred];
      const auto& pq = graph.layers[pred].act_quant;
      s.b_a_in = pq ? pq->bits(restrict_pow2) : 32.0;
    }
    specs.push_back(s);
  }
  return specs;
}

CompressionReport model_report(const NetworkGraph& graph, const NetworkGraph& baseline, double accuracy,
                               bool restrict_pow2) {
  const auto specs = layer_specs(graph, baseline, restrict_pow2);
  const auto base_specs = layer_specs(baseline, baseline, false);
  std::vector<LayerRecord> records;
  MetricTotals base;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    LayerRecord r;
    r.layer_id = graph.layers[i].cfg.name;
    r.b_w = s.b_w;
    r.b_a = graph.layers[i].act_quant ? graph.layers[i].act_quant->bits(restrict_pow2) : 32.0;
    r.p_l = s.p_out;
    r.P_l = layerwise_pruning_ratio(s.p_in, s.p_out);
    r.macs = mac_count(s);
    r.bops = bop_count(s);
    records.push_back(r);
    base.macs += mac_count(base_specs[i]);
    base.bops += bop_count(base_specs[i]);
  }
  return assemble_report(std::move(records), base, accuracy);
}

CompressionReport audit_architecture(const ArchSpec& arch) {
  NetworkGraph g;
  g.arch = arch;
  for (const auto& c : arch.layers) {
    Layer l;
    l.cfg = c;
    g.layers.push_back(std::move(l));
  }
  infer_shapes(g);
  return model_report(g, g, 0.0);
}

}  // namespace djpq
