#include "djpq/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "djpq/errors.hpp"

namespace djpq {

namespace {

constexpr double kLogFloor = 1e-12;
constexpr double kParamFloor = 1e-6;
constexpr double kCeilSnap = 1e-6;

double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

double ceil_snapped(double v) {
  const double n = std::nearbyint(v);
  if (std::abs(v - n) <= kCeilSnap * std::max(1.0, std::abs(v))) return n;
  return std::ceil(v);
}

// Branch of the piecewise quantizer for magnitude a.
enum class Region { kDead, kRange, kClip };

Region region_of(double a, const QuantizerState& s) {
  if (a < s.q_s) return Region::kDead;
  if (a <= s.q_m) return Region::kRange;
  return Region::kClip;
}

}  // namespace

void QuantizerState::validate() const {
  if (!(q_s > 0.0) || !(q_s < q_m)) {
    throw ContractError("quantizer: need 0 < q_s < q_m, got q_s=" + std::to_string(q_s) + " q_m=" + std::to_string(q_m));
  }
  if (!(d > 0.0)) throw ContractError("quantizer: step size d must be positive, got " + std::to_string(d));
  if (!(t > 0.0)) throw ContractError("quantizer: exponent t must be positive, got " + std::to_string(t));
  if (!is_signed && t != 1.0) throw ContractError("quantizer: unsigned (activation) quantizers require t == 1");
}

double QuantizerState::mapped_range() const { return std::pow(q_m - q_s, t); }

double round_half_away(double v) { return std::round(v); }

double nonlinear_map(double x, const QuantizerState& s) {
  const double a = std::abs(x);
  switch (region_of(a, s)) {
    case Region::kDead:
      return 0.0;
    case Region::kRange:
      return sign_of(x) * std::pow(a - s.q_s, s.t);
    case Region::kClip:
      break;
  }
  return sign_of(x) * s.mapped_range();
}

double quantize(double x, const QuantizerState& s) {
  if (!s.is_signed && x < 0.0) return 0.0;
  const double a = std::abs(x);
  switch (region_of(a, s)) {
    case Region::kDead:
      return 0.0;
    case Region::kRange:
      return sign_of(x) * s.d * round_half_away(std::pow(a - s.q_s, s.t) / s.d);
    case Region::kClip:
      break;
  }
  return sign_of(x) * s.d * round_half_away(s.mapped_range() / s.d);
}

Tensor quantize(const Tensor& x, const QuantizerState& s) {
  s.validate();
  Tensor out(x.shape());
  auto o = out.data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<float>(quantize(static_cast<double>(in[i]), s));
  return out;
}

double effective_bitwidth(const QuantizerState& s) {
  s.validate();
  const double ratio = s.mapped_range() / s.d;
  const double arg = s.is_signed ? ceil_snapped(ratio + 1.0) : ceil_snapped(ratio);
  if (!(arg >= 1.0) || (!s.is_signed && ratio < 1.0 - kCeilSnap)) {
    throw DegenerateQuantizerError("quantizer range (q_m - q_s)^t = " + std::to_string(s.mapped_range()) +
                                   " is narrower than one step d = " + std::to_string(s.d));
  }
  return s.is_signed ? std::log2(arg) + 1.0 : std::log2(arg);
}

double surrogate_bitwidth(const QuantizerState& s) {
  s.validate();
  const double ratio = s.mapped_range() / s.d;
  if (s.is_signed) return std::log2(ratio + 1.0) + 1.0;
  return std::max(std::log2(ratio), 1.0);
}

SurrogateBitGrads surrogate_bitwidth_grads(const QuantizerState& s) {
  s.validate();
  const double base = s.q_m - s.q_s;
  const double range = s.mapped_range();
  const double ratio = range / s.d;
  double db_dratio = 0.0;
  if (s.is_signed) {
    db_dratio = 1.0 / ((ratio + 1.0) * std::log(2.0));
  } else if (ratio > 2.0) {
    db_dratio = 1.0 / (ratio * std::log(2.0));
  }
  SurrogateBitGrads g;
  g.d = db_dratio * (-range / (s.d * s.d));
  g.q_m = db_dratio * s.t * std::pow(base, s.t - 1.0) / s.d;
  g.t = db_dratio * range * std::log(std::max(base, kLogFloor)) / s.d;
  return g;
}

QuantizerParamGrads quantizer_param_grads(double x, const QuantizerState& s) {
  QuantizerParamGrads g;
  if (!s.is_signed && x < 0.0) return g;
  const double a = std::abs(x);
  const double sg = sign_of(x);
  switch (region_of(a, s)) {
    case Region::kDead:
      return g;
    case Region::kRange: {
      const double base = a - s.q_s;
      const double mapped = std::pow(base, s.t);
      const double v = mapped / s.d;
      g.d = sg * (round_half_away(v) - v);
      g.t = sg * mapped * std::log(std::max(base, kLogFloor));
      return g;
    }
    case Region::kClip:
      break;
  }
  const double base = s.q_m - s.q_s;
  const double mapped = std::pow(base, s.t);
  const double v = mapped / s.d;
  g.d = sg * (round_half_away(v) - v);
  g.q_m = sg * s.t * std::pow(base, s.t - 1.0);
  g.t = sg * mapped * std::log(std::max(base, kLogFloor));
  return g;
}

double quantizer_input_grad(double x, const QuantizerState& s) {
  if (!s.is_signed && x < 0.0) return 0.0;
  const double a = std::abs(x);
  if (region_of(a, s) != Region::kRange) return 0.0;
  if (s.t == 1.0) return 1.0;
  const double base = a - s.q_s;
  if (base <= 0.0 && s.t > 1.0) return 0.0;
  return s.t * std::pow(std::max(base, kLogFloor), s.t - 1.0);
}

double step_for_bits(const QuantizerState& s, double bits) {
  const double range = s.mapped_range();
  if (s.is_signed) {
    const double levels = std::exp2(bits - 1.0) - 1.0;
    if (!(levels > 0.0)) throw DegenerateQuantizerError("signed grid needs more than 1 bit, got " + std::to_string(bits));
    return range / levels;
  }
  return range / std::exp2(bits);
}

Pow2Adjustment adjust_pow2(const QuantizerState& s) {
  const double b = effective_bitwidth(s);
  if (b < 1.5) {
    throw ContractError("adjust_pow2: bit-width " + std::to_string(b) + " below 1.5 has no power-of-two neighbour");
  }
  const int exponent = static_cast<int>(round_half_away(std::log2(b)));
  Pow2Adjustment out;
  out.bits = 1 << std::min(exponent, 5);
  out.clamped = exponent > 5;
  out.state = s;
  out.state.d = step_for_bits(s, out.bits);
  return out;
}

TrainableQuantizer TrainableQuantizer::for_weights(double max_abs, double bits, double q_s) {
  TrainableQuantizer q;
  q.q_s = q_s;
  q.is_signed = true;
  QuantizerState s{1.0, std::max(max_abs, 2.0 * q_s), 1.0, q_s, true};
  s.d = step_for_bits(s, bits);
  q.d = Tensor::scalar(static_cast<float>(s.d), true);
  q.q_m = Tensor::scalar(static_cast<float>(s.q_m), true);
  q.t = Tensor::scalar(1.0f, true);
  return q;
}

TrainableQuantizer TrainableQuantizer::for_activations(double max_value, double bits, double q_s) {
  TrainableQuantizer q;
  q.q_s = q_s;
  q.is_signed = false;
  QuantizerState s{1.0, std::max(max_value, 2.0 * q_s), 1.0, q_s, false};
  s.d = step_for_bits(s, bits);
  q.d = Tensor::scalar(static_cast<float>(s.d), true);
  q.q_m = Tensor::scalar(static_cast<float>(s.q_m), true);
  return q;
}

QuantizerState TrainableQuantizer::state() const {
  QuantizerState s;
  s.d = d.item();
  s.q_m = q_m.item();
  s.t = t.defined() ? t.item() : 1.0;
  s.q_s = q_s;
  s.is_signed = is_signed;
  return s;
}

void TrainableQuantizer::load_state(const QuantizerState& s) {
  d.data()[0] = static_cast<float>(s.d);
  q_m.data()[0] = static_cast<float>(s.q_m);
  if (t.defined()) t.data()[0] = static_cast<float>(s.t);
}

void TrainableQuantizer::project() {
  auto clamp_min = [](Tensor& p, double lo) {
    if (p.defined()) p.data()[0] = static_cast<float>(std::max<double>(p.data()[0], lo));
  };
  clamp_min(d, kParamFloor);
  clamp_min(t, kParamFloor);
  // q_m must stay strictly above q_s in float precision.
  const float floor_qm = std::nextafter(static_cast<float>(q_s + kParamFloor), 1e30f);
  q_m.data()[0] = std::max(q_m.data()[0], floor_qm);
  // An unsigned grid needs at least one non-zero level.
  if (!is_signed) {
    const double range = state().mapped_range();
    d.data()[0] = static_cast<float>(std::min<double>(d.data()[0], range));
  }
}

QuantizerState TrainableQuantizer::forward_state(bool restrict_pow2) const {
  if (frozen) return frozen->state;
  if (restrict_pow2) return adjust_pow2(state()).state;
  return state();
}

double TrainableQuantizer::bits(bool restrict_pow2) const {
  if (frozen) return frozen->bits;
  return effective_bitwidth(forward_state(restrict_pow2));
}

void TrainableQuantizer::freeze(bool restrict_pow2) {
  if (frozen) return;
  Frozen f;
  if (restrict_pow2) {
    const auto adj = adjust_pow2(state());
    f.state = adj.state;
    f.bits = adj.bits;
  } else {
    f.state = state();
    f.bits = static_cast<int>(std::ceil(effective_bitwidth(f.state) - 1e-9));
  }
  frozen = f;
  stop_grads();
}

void TrainableQuantizer::freeze_at(int bits) {
  Frozen f;
  f.state = state();
  f.state.d = step_for_bits(f.state, bits);
  f.bits = bits;
  frozen = f;
  stop_grads();
}

void TrainableQuantizer::stop_grads() {
  for (Tensor* p : {&d, &q_m, &t}) {
    if (!p->defined()) continue;
    p->set_requires_grad(false);
    p->clear_grad();
  }
}

Tensor fake_quantize(const Tensor& x, const TrainableQuantizer& q, const std::optional<QuantizerState>& forward_override) {
  const QuantizerState fs = forward_override ? *forward_override : q.state();
  fs.validate();
  Tensor out(x.shape());
  auto o = out.data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<float>(quantize(static_cast<double>(in[i]), fs));

  Tensor d = q.d, qm = q.q_m, t = q.t;
  Tape::current().record(out, {x, d, qm, t}, [x = x, d = d, qm = qm, t = t, fs = fs](const Tensor& o) mutable {
    auto og = o.grad();
    auto in = x.data();
    double gd = 0.0, gqm = 0.0, gt = 0.0;
    const bool need_x = x.requires_grad();
    std::span<float> xg = need_x ? x.grad() : std::span<float>{};
    for (std::size_t i = 0; i < og.size(); ++i) {
      const double xi = in[i];
      const double g = og[i];
      if (g == 0.0) continue;
      const auto pg = quantizer_param_grads(xi, fs);
      gd += g * pg.d;
      gqm += g * pg.q_m;
      gt += g * pg.t;
      if (need_x) xg[i] += static_cast<float>(g * quantizer_input_grad(xi, fs));
    }
    if (d.requires_grad()) d.grad()[0] += static_cast<float>(gd);
    if (qm.requires_grad()) qm.grad()[0] += static_cast<float>(gqm);
    if (t.defined() && t.requires_grad()) t.grad()[0] += static_cast<float>(gt);
  });
  return out;
}

Tensor surrogate_bitwidth(const TrainableQuantizer& q, const std::optional<QuantizerState>& forward_override) {
  const QuantizerState s = q.state();
  const double value = forward_override ? effective_bitwidth(*forward_override) : surrogate_bitwidth(s);
  Tensor out = Tensor::scalar(static_cast<float>(value));
  Tensor d = q.d, qm = q.q_m, t = q.t;
  Tape::current().record(out, {d, qm, t}, [d = d, qm = qm, t = t, s = s](const Tensor& o) mutable {
    const double g = o.grad()[0];
    const auto sg = surrogate_bitwidth_grads(s);
    if (d.requires_grad()) d.grad()[0] += static_cast<float>(g * sg.d);
    if (qm.requires_grad()) qm.grad()[0] += static_cast<float>(g * sg.q_m);
    if (t.defined() && t.requires_grad()) t.grad()[0] += static_cast<float>(g * sg.t);
  });
  return out;
}

}  // namespace djpq
