#pragma once

#include <span>
#include <vector>

#include "djpq/tensor.hpp"

namespace djpq {

// ---- elementwise / reduction helpers used to assemble losses ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
// Elementwise product; a scalar ([1]) operand broadcasts.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor add_scalar(const Tensor& a, float value);
Tensor square(const Tensor& a);
Tensor sum(const Tensor& a);

// ---- network primitives ----

// Cross-correlation. input [N,C_in,H,W], weight [C_out,C_in,k_h,k_w],
// bias [C_out] (may be undefined).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding);

// input [N,F] x weight [F,G] + bias [G] (bias may be undefined).
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias);

enum class BnMode { kTrain, kEval };

struct BatchNormStats {
  std::vector<float> running_mean;
  std::vector<float> running_var;
  float momentum = 0.1f;
  float epsilon = 1e-5f;

  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(channels, 0.0f), running_var(channels, 1.0f) {}
};

// Per-channel normalization of [N,C,H,W] or [N,C]. Train mode normalizes by
// batch statistics and updates `stats` (unbiased variance for the running
// estimate); eval mode uses the running statistics.
Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats, BnMode mode);

Tensor relu(const Tensor& input);

// Windowed max over [N,C,H,W]; spatial output floor((H + 2p - window)/stride) + 1.
// Ties route the gradient to the first maximum in row-major window order.
Tensor maxpool2d(const Tensor& input, int window, int stride, int padding = 0);

// [N,C,H,W] -> [N,C] mean over the spatial dims.
Tensor global_avgpool(const Tensor& input);

// Mean over the batch of -log softmax(logits)[label].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

// Fraction of rows whose argmax equals the label.
double accuracy(const Tensor& logits, std::span<const int> labels);

// param <- param - lr * lr_scale * grad, then grad is zeroed.
void sgd_step(Tensor& param, float lr, float lr_scale);

}  // namespace djpq
