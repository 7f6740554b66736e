#pragma once

#include <optional>

#include "djpq/tensor.hpp"

namespace djpq {

// Learnable nonlinear-mapping uniform quantizer.
//
// Inputs with |x| < q_s map to zero, inputs inside [q_s, q_m] are warped by
// (|x| - q_s)^t and rounded to a multiple of the step size d, and inputs
// above q_m clip to the top level. Weights use a signed grid with learnable
// t; ReLU activations use an unsigned grid with t fixed at 1.
//
// Scalars are kept in double so that grids with up to 2^31 levels stay exact.
struct QuantizerState {
  double d = 1.0;
  double q_m = 1.0;
  double t = 1.0;
  double q_s = 0.01;
  bool is_signed = true;

  // Throws ContractError if 0 < q_s < q_m, d > 0, t > 0 (t == 1 unsigned) fails.
  void validate() const;
  // (q_m - q_s)^t: the largest mapped magnitude.
  double mapped_range() const;
};

// Default dead-zone thresholds.
inline constexpr double kWeightDeadZone = 0.01;
inline constexpr double kActivationDeadZone = 1e-6;

// Round half away from zero.
double round_half_away(double v);

double nonlinear_map(double x, const QuantizerState& s);
double quantize(double x, const QuantizerState& s);
// Elementwise quantization without gradient tracking.
Tensor quantize(const Tensor& x, const QuantizerState& s);

// Exact bit-width: signed log2(ceil(R/d + 1)) + 1, unsigned log2(ceil(R/d)),
// with R = (q_m - q_s)^t. The ceiling snaps values within 1e-6 relative of
// an integer to that integer so that grids built from a bit-width reproduce
// it. Throws DegenerateQuantizerError when the log argument is below 1.
double effective_bitwidth(const QuantizerState& s);

// Smooth surrogate with the ceiling removed: signed log2(R/d + 1) + 1,
// unsigned max(log2(R/d), 1).
double surrogate_bitwidth(const QuantizerState& s);

struct SurrogateBitGrads {
  double d = 0.0;
  double q_m = 0.0;
  double t = 0.0;
};
SurrogateBitGrads surrogate_bitwidth_grads(const QuantizerState& s);

struct QuantizerParamGrads {
  double d = 0.0;
  double q_m = 0.0;
  double t = 0.0;
};

// Straight-through gradients of the quantized output w.r.t. (d, q_m, t),
// branch by branch. log(|x| - q_s) is clamped at log(1e-12).
QuantizerParamGrads quantizer_param_grads(double x, const QuantizerState& s);

// Straight-through gradient w.r.t. the input: t (|x| - q_s)^(t-1) inside
// [q_s, q_m], zero in the dead zone and the clipped region.
double quantizer_input_grad(double x, const QuantizerState& s);

// Step size that gives exactly `bits` bits for the state's range.
double step_for_bits(const QuantizerState& s, double bits);

struct Pow2Adjustment {
  QuantizerState state;
  int bits = 0;
  bool clamped = false;  // rounded width exceeded 32 and was clamped
};

// Rounds log2(b) to the nearest integer, sets b' = 2^round(log2 b) (capped at
// 32) and recomputes d for that width; q_m, q_s and t are unchanged.
// Requires effective_bitwidth(s) >= 1.5.
Pow2Adjustment adjust_pow2(const QuantizerState& s);

// Trainable quantizer: parameters live in [1]-shaped tensors so they take
// part in autograd; q_s and signedness are fixed.
struct TrainableQuantizer {
  Tensor d;
  Tensor q_m;
  Tensor t;  // undefined for activation quantizers (t == 1)
  double q_s = kWeightDeadZone;
  bool is_signed = true;

  // Set at export: the grid used for inference and its integer bit-width.
  struct Frozen {
    QuantizerState state;
    int bits = 0;
  };
  std::optional<Frozen> frozen;

  static TrainableQuantizer for_weights(double max_abs, double bits, double q_s = kWeightDeadZone);
  static TrainableQuantizer for_activations(double max_value, double bits, double q_s = kActivationDeadZone);

  QuantizerState state() const;
  void load_state(const QuantizerState& s);
  // Clamps d, q_m, t to >= 1e-6 and q_m above q_s after an optimizer step.
  void project();

  // State used by the forward pass: the frozen grid if any, otherwise the
  // trainable state, pow2-adjusted when `restrict_pow2` is set.
  QuantizerState forward_state(bool restrict_pow2) const;
  // Bit-width for reports: frozen integer width, otherwise the exact
  // (possibly fractional) width of forward_state().
  double bits(bool restrict_pow2) const;
  // Fixes the grid for deployment. Unrestricted quantizers keep their step
  // size and round the width up to an integer; restricted ones take the
  // power-of-two grid.
  void freeze(bool restrict_pow2);
  // Fixed grid with exactly `bits` bits over the current range.
  void freeze_at(int bits);
  bool trainable() const { return !frozen.has_value(); }

 private:
  void stop_grads();
};

// Fake quantization with straight-through gradients to x, d, q_m and t.
// When `forward_override` is set (power-of-two restricted mode) the forward
// pass uses that state while gradients flow to the trainable parameters.
// Unsigned quantizers clamp negative inputs to zero.
Tensor fake_quantize(const Tensor& x, const TrainableQuantizer& q,
                     const std::optional<QuantizerState>& forward_override = std::nullopt);

// Differentiable surrogate bit-width as a [1] tensor. With `forward_override`
// the value is the override's exact bit-width and the gradient is the
// surrogate gradient at the trainable parameters.
Tensor surrogate_bitwidth(const TrainableQuantizer& q,
                          const std::optional<QuantizerState>& forward_override = std::nullopt);

}  // namespace djpq
