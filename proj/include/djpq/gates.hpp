#pragma once

#include <random>
#include <span>
#include <vector>

#include "djpq/tensor.hpp"

namespace djpq {

// Multiplicative Gaussian channel gates z = mu + eps * sigma.
struct GateState {
  Tensor mu;     // [C]
  Tensor sigma;  // [C], strictly positive
  float alpha_th = 1e-3f;
  float tau = 1e-2f;

  static GateState make(std::size_t channels, float mu_init = 1.0f, float sigma_init = 0.5f, float alpha_th = 1e-3f,
                        float tau = 1e-2f);

  std::size_t channels() const { return mu.numel(); }
  // mu_i^2 / sigma_i^2
  double alpha(std::size_t i) const;
  std::vector<double> alphas() const;
  // Channels with alpha >= alpha_th.
  std::vector<bool> keep_mask() const;
  // Throws ContractError unless sigma > 0 everywhere and lengths agree.
  void validate() const;
  // Keeps sigma >= 1e-8 after an optimizer step.
  void project();
};

enum class GateMode { kTrain, kEval };

struct GateSample {
  Tensor z;                 // [C]
  std::vector<float> eps;   // noise used (all zero in eval mode)
};

// Train mode draws eps ~ N(0, I); eval mode returns z = mu. The result is
// differentiable w.r.t. mu (coefficient 1) and sigma (coefficient eps).
GateSample sample_gates(const GateState& state, std::mt19937_64& rng, GateMode mode);

// Scales channel i of h ([N,C,H,W] or [N,C]) by z[i].
Tensor gate_forward(const Tensor& h, const Tensor& z);

// sum over layers and channels of log(1 + mu^2 / sigma^2)
Tensor vib_regularizer(std::span<const GateState> states);

// Fraction of channels with alpha < alpha_th.
double hard_prune_ratio(const GateState& state);

// Sign convention for the sigmoid relaxation of the prune indicator.
enum class SoftPruneForm {
  kIndicator,  // sigmoid((alpha_th - alpha) / tau): tends to 1{alpha < alpha_th}
  kLiteral,    // sigmoid((alpha - alpha_th) / tau): the printed form
};

// Mean over channels of the sigmoid relaxation; differentiable in mu, sigma.
Tensor soft_prune_ratio(const GateState& state, SoftPruneForm form = SoftPruneForm::kIndicator);

}  // namespace djpq
