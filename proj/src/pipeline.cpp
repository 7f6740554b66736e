#include <algorithm>
#include <numeric>

#include "djpq/errors.hpp"
#include "djpq/trainer.hpp"

namespace djpq {

namespace {

void require(bool ok, const std::string& field, const std::string& rule) {
  if (!ok) throw ConfigError("invalid config field '" + field + "': " + rule);
}

Tensor calibration_batch(const Dataset& train, std::size_t count = 500) {
  std::vector<std::size_t> idx(std::min(count, train.size()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return train.images(idx);
}

std::vector<EpochStats> fit(NetworkGraph& g, Optimizer& opt, const Dataset& train, int epochs, int batch_size,
                            Strengths strengths, bool restrict_pow2, SoftPruneForm form, std::mt19937_64& rng,
                            int first_epoch) {
  std::vector<EpochStats> history;
  EpochSettings es{opt.lr(), batch_size, restrict_pow2, form};
  for (int e = 0; e < epochs; ++e) history.push_back(train_epoch(g, opt, train, es, strengths, rng, first_epoch + e));
  return history;
}

}  // namespace

void TrainConfig::validate() const {
  require(gamma >= 0.0, "gamma", "must be >= 0");
  require(beta >= 0.0, "beta", "must be >= 0");
  require(lr > 0.0, "lr", "must be > 0");
  require(scale_prune > 0.0, "scale_prune", "must be > 0");
  require(scale_quant > 0.0, "scale_quant", "must be > 0");
  require(momentum >= 0.0 && momentum < 1.0, "momentum", "must lie in [0, 1)");
  require(weight_decay >= 0.0, "weight_decay", "must be >= 0");
  require(epochs >= 1, "epochs", "must be >= 1");
  require(pretrain_epochs >= 0, "pretrain_epochs", "must be >= 0");
  require(batch_size >= 2, "batch_size", "must be >= 2 (batch-norm statistics)");
  require(eval_batch_size >= 1, "eval_batch_size", "must be >= 1");
  require(b_init_w >= 2.0 && b_init_w <= 32.0, "b_init_w", "must lie in [2, 32]");
  require(b_init_a >= 2.0 && b_init_a <= 32.0, "b_init_a", "must lie in [2, 32]");
  require(alpha_th > 0.0, "alpha_th", "must be > 0");
  require(tau > 0.0, "tau", "must be > 0");
  require(gate_sigma_init > 0.0, "gate_sigma_init", "must be > 0");
  require(gamma_anneal > 0.0, "gamma_anneal", "must be > 0");
  require(beta_anneal > 0.0, "beta_anneal", "must be > 0");
  require(stage1_epochs >= 1, "stage1_epochs", "must be >= 1");
  require(stage1_gamma >= 0.0, "stage1_gamma", "must be >= 0");
  require(stage1_lr > 0.0, "stage1_lr", "must be > 0");
  require(stage1_scale_prune > 0.0, "stage1_scale_prune", "must be > 0");
  require(stage2_epochs >= 1, "stage2_epochs", "must be >= 1");
  require(stage2_beta >= 0.0, "stage2_beta", "must be >= 0");
  require(stage2_lr > 0.0, "stage2_lr", "must be > 0");
  require(stage2_scale_quant > 0.0, "stage2_scale_quant", "must be > 0");
  require(stage2_target_bops >= 0.0, "stage2_target_bops", "must be >= 0");
  require(bop_tolerance > 0.0 && bop_tolerance < 1.0, "bop_tolerance", "must lie in (0, 1)");
  if (mode == TrainMode::kTwoStage && stage2_quant == StageTwoQuant::kMatched) {
    require(stage2_target_bops > 0.0, "stage2_target_bops", "must be > 0 when stage2_quant = matched");
  }
}

std::vector<std::string> preset_names() { return {"vgg7", "resnet18", "mobilenetv2", "two-stage", "mini"}; }

TrainConfig preset_config(const std::string& name) {
  TrainConfig c;
  c.preset = name;
  if (name == "vgg7") {
    c.gamma = 1e-6;
    c.beta = 1e-9;
    c.lr = 1e-3;
    c.scale_prune = 10.0;
    c.scale_quant = 0.05;
    c.b_init_w = c.b_init_a = 6.0;
  } else if (name == "resnet18") {
    c.gamma = 1e-5;
    c.beta = 1e-10;
    c.lr = 1e-3;
    c.scale_prune = 5.0;
    c.scale_quant = 0.05;
    c.b_init_w = 6.0;
    c.b_init_a = 8.0;
  } else if (name == "mobilenetv2") {
    c.gamma = 1e-8;
    c.beta = 1e-11;
    c.lr = 1e-4;
    c.scale_prune = 1.0;
    c.scale_quant = 0.005;
    c.b_init_w = c.b_init_a = 8.0;
  } else if (name == "two-stage") {
    c.mode = TrainMode::kTwoStage;
    c.gamma = 0.0;
    c.beta = 0.0;
    c.lr = 1e-3;
    c.stage1_epochs = c.stage2_epochs = 20;
    c.stage1_gamma = 5e-6;
    c.stage1_lr = 1e-3;
    c.stage1_scale_prune = 5.0;
    c.stage2_beta = 1e-11;
    c.stage2_lr = 5e-4;
    c.stage2_scale_quant = 0.05;
    c.stage2_quant = StageTwoQuant::kLearned;
  } else if (name == "mini") {
    // Desk-scale VGG-mini on the bundled MNIST subset. The two-stage
    // schedule splits the same epoch budget as the joint run.
    c.gamma = 1e-3;
    c.beta = 1e-9;
    c.lr = 0.02;
    c.momentum = 0.9;
    c.scale_prune = 1.0;
    c.scale_quant = 0.001;
    c.b_init_w = c.b_init_a = 6.0;
    c.pretrain_epochs = 4;
    c.epochs = 6;
    c.batch_size = 64;
    c.stage1_epochs = 3;
    c.stage1_gamma = 1e-3;
    c.stage1_lr = 0.02;
    c.stage1_scale_prune = 1.0;
    c.stage2_epochs = 3;
    c.stage2_beta = 1e-9;
    c.stage2_lr = 0.02;
    c.stage2_scale_quant = 0.001;
    c.stage2_quant = StageTwoQuant::kMatched;
  } else {
    std::string names;
    for (const auto& n : preset_names()) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (valid: " + names + ")");
  }
  return c;
}

NetworkGraph pretrain(const ArchSpec& arch, const TrainConfig& cfg, const Dataset& train,
                      std::vector<EpochStats>* history) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  NetworkGraph g = build_network(arch, rng);
  if (cfg.pretrain_epochs > 0) {
    Optimizer opt(g, cfg.lr, cfg.momentum, 1.0, 1.0, cfg.weight_decay);
    auto h = fit(g, opt, train, cfg.pretrain_epochs, cfg.batch_size, Strengths{}, false, cfg.sigmoid_form, rng, 0);
    if (history) history->insert(history->end(), h.begin(), h.end());
  }
  return g;
}

RunResult run_from_pretrained(const NetworkGraph& pretrained, const TrainConfig& cfg, const DataSplits& data) {
  cfg.validate();
  if (pretrained.has_gates() || pretrained.has_quantizers()) {
    throw ContractError("run_from_pretrained expects a float network without gates or quantizers");
  }
  RunResult r;
  r.mode = cfg.mode;
  NetworkGraph g = clone_graph(pretrained);
  // Independent stream for the post-pretraining phase, identical across modes.
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  const int first = cfg.pretrain_epochs;
  const GateInit gi{static_cast<float>(cfg.gate_mu_init), static_cast<float>(cfg.gate_sigma_init),
                    static_cast<float>(cfg.alpha_th), static_cast<float>(cfg.tau)};
  const QuantInit qi{cfg.b_init_w, cfg.b_init_a};

  switch (cfg.mode) {
    case TrainMode::kFloatBaseline: {
      Optimizer opt(g, cfg.lr, cfg.momentum, 1.0, 1.0, cfg.weight_decay);
      r.history = fit(g, opt, data.train, cfg.epochs, cfg.batch_size, Strengths{}, false, cfg.sigmoid_form, rng, first);
      recalibrate_batchnorm(g, data.train, cfg.batch_size);
      r.exported = export_compressed(g, data.test, false, cfg.eval_batch_size);
      break;
    }
    case TrainMode::kDjpq:
    case TrainMode::kDjpqRestrict: {
      const bool restrict_pow2 = cfg.mode == TrainMode::kDjpqRestrict;
      attach_gates(g, gi);
      attach_quantizers(g, qi, calibration_batch(data.train));
      Optimizer opt(g, cfg.lr, cfg.momentum, cfg.scale_prune, cfg.scale_quant, cfg.weight_decay);
      Strengths s{cfg.gamma, cfg.beta, cfg.gamma_anneal, cfg.beta_anneal};
      r.history = fit(g, opt, data.train, cfg.epochs, cfg.batch_size, s, restrict_pow2, cfg.sigmoid_form, rng, first);
      {
        NoGradGuard guard;
        r.surrogate_bops = soft_bop_total(g, restrict_pow2, cfg.sigmoid_form).item();
      }
      recalibrate_batchnorm(g, data.train, cfg.batch_size, restrict_pow2);
      r.exported = export_compressed(g, data.test, restrict_pow2, cfg.eval_batch_size);
      break;
    }
    case TrainMode::kTwoStage: {
      attach_gates(g, gi);
      {
        Optimizer opt(g, cfg.stage1_lr, cfg.momentum, cfg.stage1_scale_prune, 1.0, cfg.weight_decay);
        Strengths s{cfg.stage1_gamma, 0.0, cfg.gamma_anneal, 1.0};
        r.history = fit(g, opt, data.train, cfg.stage1_epochs, cfg.batch_size, s, false, cfg.sigmoid_form, rng, first);
      }
      NetworkGraph pruned = apply_hard_pruning(g);
      attach_quantizers(pruned, qi, calibration_batch(data.train));
      Strengths s2{0.0, 0.0, 1.0, cfg.beta_anneal};
      if (cfg.stage2_quant == StageTwoQuant::kFixed8) {
        for (auto& l : pruned.layers) {
          if (l.weight_quant) l.weight_quant->freeze_at(8);
          if (l.act_quant) l.act_quant->freeze_at(8);
        }
      } else if (cfg.stage2_quant == StageTwoQuant::kMatched) {
        allocate_bits(pruned, cfg.stage2_target_bops, cfg.bop_tolerance);
      } else {
        s2.beta = cfg.stage2_beta;
      }
      Optimizer opt(pruned, cfg.stage2_lr, cfg.momentum, 1.0, cfg.stage2_scale_quant, cfg.weight_decay);
      auto h = fit(pruned, opt, data.train, cfg.stage2_epochs, cfg.batch_size, s2, false, cfg.sigmoid_form, rng,
                   first + cfg.stage1_epochs);
      r.history.insert(r.history.end(), h.begin(), h.end());
      {
        NoGradGuard guard;
        r.surrogate_bops = soft_bop_total(pruned, false, cfg.sigmoid_form).item();
      }
      recalibrate_batchnorm(pruned, data.train, cfg.batch_size);
      r.exported = export_compressed(pruned, data.test, false, cfg.eval_batch_size);
      break;
    }
  }
  return r;
}

RunResult run_training(const ArchSpec& arch, const TrainConfig& cfg, const DataSplits& data) {
  std::vector<EpochStats> pre_history;
  NetworkGraph pre = pretrain(arch, cfg, data.train, &pre_history);
  const double pre_acc = cfg.pretrain_epochs > 0 ? evaluate(pre, data.test, cfg.eval_batch_size) : 0.0;
  RunResult r = run_from_pretrained(pre, cfg, data);
  r.pretrain_accuracy = pre_acc;
  r.history.insert(r.history.begin(), pre_history.begin(), pre_history.end());
  return r;
}

}  // namespace djpq
