#include "djpq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "djpq/errors.hpp"

namespace djpq {

namespace {

// Drops tape entries left behind when a forward pass throws.
struct TapeReset {
  ~TapeReset() { Tape::current().clear(); }
};

std::optional<QuantizerState> override_for(const TrainableQuantizer& q, bool restrict_pow2) {
  if (q.frozen || restrict_pow2) return q.forward_state(restrict_pow2);
  return std::nullopt;
}

Tensor bits_term(const std::optional<TrainableQuantizer>& q, bool restrict_pow2) {
  if (!q) return Tensor::scalar(32.0f);
  return surrogate_bitwidth(*q, override_for(*q, restrict_pow2));
}

}  // namespace

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kDjpq: return "djpq";
    case TrainMode::kDjpqRestrict: return "djpq-restrict";
    case TrainMode::kTwoStage: return "two-stage";
    case TrainMode::kFloatBaseline: return "float-baseline";
  }
  return "?";
}

std::string to_string(StageTwoQuant q) {
  switch (q) {
    case StageTwoQuant::kLearned: return "learned";
    case StageTwoQuant::kFixed8: return "fixed8";
    case StageTwoQuant::kMatched: return "matched";
  }
  return "?";
}

Tensor soft_bop_total(const NetworkGraph& graph, bool restrict_pow2, SoftPruneForm form) {
  const bool quantized = graph.has_quantizers();
  std::vector<Tensor> gate_keep(graph.gates.size());
  for (std::size_t g = 0; g < graph.gates.size(); ++g) {
    gate_keep[g] = add_scalar(scale(soft_prune_ratio(graph.gates[g], form), -1.0f), 1.0f);
  }
  Tensor total;
  for (const auto& l : graph.layers) {
    const double macs = static_cast<double>(l.fan_in() * l.out_channels() * l.map_h * l.map_w) *
                        (l.cfg.kind == LayerKind::kConv ? l.cfg.kernel * l.cfg.kernel : 1);
    Tensor term = scale(bits_term(l.weight_quant, restrict_pow2), static_cast<float>(macs));
    if (l.input_index < 0) {
      term = scale(term, quantized ? static_cast<float>(graph.arch.input_bits) : 32.0f);
    } else {
      const auto& pred = graph.layers[static_cast<std::size_t>(l.input_index)];
      term = mul(term, bits_term(pred.act_quant, restrict_pow2));
      if (pred.gate >= 0) term = mul(term, gate_keep[static_cast<std::size_t>(pred.gate)]);
    }
    if (l.gate >= 0) term = mul(term, gate_keep[static_cast<std::size_t>(l.gate)]);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

LossTerms djpq_loss(const Tensor& logits, std::span<const int> labels, const NetworkGraph& graph, double gamma,
                    double beta, bool restrict_pow2, SoftPruneForm form) {
  LossTerms t;
  t.total = softmax_cross_entropy(logits, labels);
  t.ce = t.total.item();
  if (gamma > 0.0 && graph.has_gates()) {
    Tensor vib = vib_regularizer(graph.gates);
    t.vib = vib.item();
    t.total = add(t.total, scale(vib, static_cast<float>(gamma)));
  }
  if (beta > 0.0) {
    Tensor bops = soft_bop_total(graph, restrict_pow2, form);
    t.bops = bops.item();
    t.total = add(t.total, scale(bops, static_cast<float>(beta)));
  }
  return t;
}

Optimizer::Optimizer(NetworkGraph& graph, double lr, double momentum, double scale_prune, double scale_quant,
                     double weight_decay, bool train_weights)
    : graph_(&graph), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
  auto push = [&](const Tensor& t, double s, bool decay, std::string name) {
    if (!t.defined()) return;
    groups_.push_back({t, s, std::move(name)});
    decay_.push_back(decay);
  };
  for (auto& l : graph.layers) {
    if (train_weights) {
      push(l.weight, 1.0, true, l.cfg.name + ".weight");
      push(l.bias, 1.0, false, l.cfg.name + ".bias");
      push(l.bn_gamma, 1.0, false, l.cfg.name + ".bn_gamma");
      push(l.bn_beta, 1.0, false, l.cfg.name + ".bn_beta");
    }
    for (auto* q : {&l.weight_quant, &l.act_quant}) {
      if (!*q || !(*q)->trainable()) continue;
      const std::string prefix = l.cfg.name + (q == &l.weight_quant ? ".wq." : ".aq.");
      push((*q)->d, scale_quant, false, prefix + "d");
      push((*q)->q_m, scale_quant, false, prefix + "q_m");
      push((*q)->t, scale_quant, false, prefix + "t");
    }
  }
  for (std::size_t i = 0; i < graph.gates.size(); ++i) {
    push(graph.gates[i].mu, scale_prune, false, "gate" + std::to_string(i) + ".mu");
    push(graph.gates[i].sigma, scale_prune, false, "gate" + std::to_string(i) + ".sigma");
  }
  for (auto& g : groups_) g.param.set_requires_grad(true);
  velocity_.resize(groups_.size());
}

void Optimizer::step() {
  for (std::size_t i = 0; i < groups_.size(); ++i) {
    Tensor& p = groups_[i].param;
    if (!p.has_grad()) continue;
    for (float g : p.grad()) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in " + groups_[i].name);
    }
    if (momentum_ == 0.0 && weight_decay_ == 0.0) {
      sgd_step(p, static_cast<float>(lr_), static_cast<float>(groups_[i].lr_scale));
      continue;
    }
    auto data = p.data();
    auto grad = p.grad();
    auto& v = velocity_[i];
    if (v.empty()) v.assign(data.size(), 0.0f);
    const float wd = decay_[i] ? static_cast<float>(weight_decay_) : 0.0f;
    const float m = static_cast<float>(momentum_);
    const float step = static_cast<float>(lr_ * groups_[i].lr_scale);
    for (std::size_t k = 0; k < data.size(); ++k) {
      v[k] = m * v[k] + grad[k] + wd * data[k];
      data[k] -= step * v[k];
    }
    p.zero_grad();
  }
  for (auto& l : graph_->layers) {
    if (l.weight_quant && l.weight_quant->trainable()) l.weight_quant->project();
    if (l.act_quant && l.act_quant->trainable()) l.act_quant->project();
  }
  for (auto& g : graph_->gates) g.project();
}

void Optimizer::zero_grad() {
  for (auto& g : groups_) g.param.clear_grad();
}

std::vector<LayerSnapshot> layer_snapshot(const NetworkGraph& graph, bool restrict_pow2) {
  std::vector<LayerSnapshot> out;
  for (const auto& l : graph.layers) {
    LayerSnapshot s;
    s.name = l.cfg.name;
    if (l.weight_quant) s.b_w = l.weight_quant->bits(restrict_pow2);
    if (l.act_quant) s.b_a = l.act_quant->bits(restrict_pow2);
    if (l.gate >= 0) s.p = hard_prune_ratio(graph.gates[static_cast<std::size_t>(l.gate)]);
    out.push_back(s);
  }
  return out;
}

EpochStats train_epoch(NetworkGraph& graph, Optimizer& opt, const Dataset& data, const EpochSettings& settings,
                       Strengths& strengths, std::mt19937_64& rng, int epoch_index) {
  if (data.size() < 2) throw DataError("training set needs at least 2 samples");
  if (settings.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  TapeReset reset;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  EpochStats stats;
  stats.epoch = epoch_index;
  stats.gamma = strengths.gamma;
  stats.beta = strengths.beta;
  double loss_sum = 0.0, correct = 0.0, seen = 0.0;
  const std::size_t bs = static_cast<std::size_t>(settings.batch_size);
  std::size_t batch_no = 0;
  ForwardOptions fo{BnMode::kTrain, &rng, settings.restrict_pow2};
  for (std::size_t start = 0; start < order.size(); start += bs, ++batch_no) {
    const std::size_t end = std::min(order.size(), start + bs);
    if (end - start < 2) break;  // batch-norm needs two samples
    std::span<const std::size_t> idx(order.data() + start, end - start);
    const Tensor x = data.images(idx);
    const auto y = data.batch_labels(idx);
    const Tensor logits = forward(graph, x, fo);
    LossTerms terms = djpq_loss(logits, y, graph, strengths.gamma, strengths.beta, settings.restrict_pow2, settings.form);
    const double loss = terms.total.item();
    if (!std::isfinite(loss) || loss > 1e4) {
      throw TrainingError("loss diverged at epoch " + std::to_string(epoch_index) + ", batch " +
                          std::to_string(batch_no) + ": " + std::to_string(loss) +
                          " (ce=" + std::to_string(terms.ce) + ", vib=" + std::to_string(terms.vib) +
                          ", bops=" + std::to_string(terms.bops) + ")");
    }
    backward(terms.total);
    opt.step();

    const double n = static_cast<double>(idx.size());
    if (batch_no == 0) stats.first_batch_loss = loss;
    stats.last_batch_loss = loss;
    loss_sum += loss * n;
    correct += accuracy(logits, y) * n;
    seen += n;
  }
  stats.mean_loss = loss_sum / seen;
  stats.accuracy = correct / seen;
  stats.layers = layer_snapshot(graph, settings.restrict_pow2);
  strengths.anneal();
  return stats;
}

void recalibrate_batchnorm(NetworkGraph& graph, const Dataset& data, int batch_size, bool restrict_pow2) {
  if (data.size() == 0) throw DataError("recalibration set is empty");
  std::vector<BatchNormStats*> stats;
  for (auto& l : graph.layers) {
    if (l.cfg.batchnorm) stats.push_back(&l.bn_stats);
  }
  if (stats.empty()) return;
  std::vector<float> momenta;
  for (auto* s : stats) {
    momenta.push_back(s->momentum);
    std::fill(s->running_mean.begin(), s->running_mean.end(), 0.0f);
    std::fill(s->running_var.begin(), s->running_var.end(), 0.0f);
  }
  NoGradGuard guard;
  const std::size_t bs = static_cast<std::size_t>(std::max(batch_size, 1));
  std::vector<std::size_t> idx;
  ForwardOptions fo{BnMode::kTrain, nullptr, restrict_pow2, true};
  std::size_t k = 0;
  for (std::size_t start = 0; start + bs <= data.size() || start == 0; start += bs, ++k) {
    const std::size_t end = std::min(data.size(), start + bs);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    for (auto* s : stats) s->momentum = 1.0f / static_cast<float>(k + 1);
    forward(graph, data.images(idx), fo);
  }
  for (std::size_t i = 0; i < stats.size(); ++i) stats[i]->momentum = momenta[i];
}

double evaluate(NetworkGraph& graph, const Dataset& data, int batch_size, bool restrict_pow2) {
  if (data.size() == 0) throw DataError("evaluation set is empty");
  NoGradGuard guard;
  const std::size_t bs = static_cast<std::size_t>(std::max(batch_size, 1));
  std::vector<std::size_t> idx;
  double correct = 0.0;
  ForwardOptions fo{BnMode::kEval, nullptr, restrict_pow2};
  for (std::size_t start = 0; start < data.size(); start += bs) {
    const std::size_t end = std::min(data.size(), start + bs);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor logits = forward(graph, data.images(idx), fo);
    correct += accuracy(logits, data.batch_labels(idx)) * static_cast<double>(idx.size());
  }
  return correct / static_cast<double>(data.size());
}

NetworkGraph baseline_graph(const ArchSpec& arch) {
  NetworkGraph g;
  g.arch = arch;
  for (const auto& c : arch.layers) {
    Layer l;
    l.cfg = c;
    g.layers.push_back(std::move(l));
  }
  infer_shapes(g);
  return g;
}

Exported export_compressed(const NetworkGraph& graph, const Dataset& test, bool restrict_pow2, int eval_batch) {
  Exported e;
  e.graph = apply_hard_pruning(graph);
  for (auto& l : e.graph.layers) {
    for (auto* q : {&l.weight_quant, &l.act_quant}) {
      if (*q) (*q)->freeze(restrict_pow2);
    }
  }
  const double acc = evaluate(e.graph, test, eval_batch, restrict_pow2);
  e.report = model_report(e.graph, baseline_graph(graph.arch), acc, restrict_pow2);
  return e;
}

bool allocate_bits(NetworkGraph& graph, double target_bops, double tolerance) {
  if (!(target_bops > 0.0)) throw ConfigError("stage2_target_bops must be positive for matched allocation");
  std::vector<TrainableQuantizer*> qs;
  for (auto& l : graph.layers) {
    if (l.weight_quant) qs.push_back(&*l.weight_quant);
    if (l.act_quant) qs.push_back(&*l.act_quant);
  }
  if (qs.empty()) throw ContractError("allocate_bits: graph has no quantizers");
  const NetworkGraph base = baseline_graph(graph.arch);
  auto total = [&] { return model_report(graph, base, 0.0).totals.bops; };
  std::vector<int> bits(qs.size(), 16);
  for (std::size_t i = 0; i < qs.size(); ++i) qs[i]->freeze_at(bits[i]);
  double bops = total();
  while (bops > target_bops * (1.0 + tolerance)) {
    const int widest = *std::max_element(bits.begin(), bits.end());
    if (widest <= 2) break;
    std::size_t pick = qs.size();
    double best = bops;
    for (std::size_t i = 0; i < qs.size(); ++i) {
      if (bits[i] != widest) continue;
      qs[i]->freeze_at(bits[i] - 1);
      const double trial = total();
      qs[i]->freeze_at(bits[i]);
      if (pick == qs.size() || trial < best) {
        pick = i;
        best = trial;
      }
    }
    bits[pick] -= 1;
    qs[pick]->freeze_at(bits[pick]);
    bops = best;
  }
  return std::abs(bops - target_bops) <= tolerance * target_bops;
}

}  // namespace djpq
