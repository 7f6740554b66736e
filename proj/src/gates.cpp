#include "djpq/gates.hpp"

#include <algorithm>
#include <cmath>

#include "djpq/errors.hpp"

namespace djpq {

namespace {
constexpr float kSigmaFloor = 1e-8f;

double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

GateState GateState::make(std::size_t channels, float mu_init, float sigma_init, float alpha_th, float tau) {
  GateState g;
  g.mu = Tensor(Shape{channels}, mu_init, true);
  g.sigma = Tensor(Shape{channels}, sigma_init, true);
  g.alpha_th = alpha_th;
  g.tau = tau;
  g.validate();
  return g;
}

double GateState::alpha(std::size_t i) const {
  const double m = mu.data()[i];
  const double s = sigma.data()[i];
  return (m * m) / (s * s);
}

std::vector<double> GateState::alphas() const {
  std::vector<double> out(channels());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha(i);
  return out;
}

std::vector<bool> GateState::keep_mask() const {
  std::vector<bool> keep(channels());
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = !(alpha(i) < alpha_th);
  return keep;
}

void GateState::validate() const {
  if (!mu.defined() || !sigma.defined() || mu.numel() != sigma.numel()) {
    throw ContractError("gate state: mu and sigma must have equal length");
  }
  for (float s : sigma.data()) {
    if (!(s > 0.0f)) throw ContractError("gate state: sigma must be strictly positive");
  }
  if (!(alpha_th > 0.0f) || !(tau > 0.0f)) throw ContractError("gate state: alpha_th and tau must be positive");
}

void GateState::project() {
  for (float& s : sigma.data()) s = std::max(s, kSigmaFloor);
}

GateSample sample_gates(const GateState& state, std::mt19937_64& rng, GateMode mode) {
  const std::size_t c = state.channels();
  GateSample out;
  out.eps.assign(c, 0.0f);
  if (mode == GateMode::kTrain) {
    std::normal_distribution<float> normal(0.0f, 1.0f);
    for (auto& e : out.eps) e = normal(rng);
  }
  out.z = Tensor(Shape{c});
  auto z = out.z.data();
  auto m = state.mu.data();
  auto s = state.sigma.data();
  for (std::size_t i = 0; i < c; ++i) z[i] = m[i] + out.eps[i] * s[i];
  Tensor mu = state.mu, sigma = state.sigma;
  Tape::current().record(out.z, {mu, sigma}, [mu = mu, sigma = sigma, eps = out.eps](const Tensor& o) mutable {
    auto og = o.grad();
    if (mu.requires_grad()) {
      auto g = mu.grad();
      for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i];
    }
    if (sigma.requires_grad()) {
      auto g = sigma.grad();
      for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i] * eps[i];
    }
  });
  return out;
}

Tensor gate_forward(const Tensor& h, const Tensor& z) {
  if (h.rank() < 2 || z.rank() != 1 || h.dim(1) != z.numel()) {
    throw DimensionError("gate_forward: gates " + shape_str(z.shape()) + " do not match channels of " +
                         shape_str(h.shape()));
  }
  const std::size_t n = h.dim(0), c = h.dim(1);
  const std::size_t spatial = h.numel() / (n * c);
  Tensor out(h.shape());
  auto o = out.data();
  auto x = h.data();
  auto zd = z.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * spatial;
      for (std::size_t j = 0; j < spatial; ++j) o[base + j] = zd[ch] * x[base + j];
    }
  }
  Tape::current().record(out, {h, z}, [h = h, z = z, n = n, c = c, spatial = spatial](const Tensor& o) mutable {
    auto og = o.grad();
    auto x = h.data();
    auto zd = z.data();
    std::span<float> hg = h.requires_grad() ? h.grad() : std::span<float>{};
    std::span<float> zg = z.requires_grad() ? z.grad() : std::span<float>{};
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t base = (i * c + ch) * spatial;
        float acc = 0.0f;
        for (std::size_t j = 0; j < spatial; ++j) {
          if (!hg.empty()) hg[base + j] += zd[ch] * og[base + j];
          acc += og[base + j] * x[base + j];
        }
        if (!zg.empty()) zg[ch] += acc;
      }
    }
  });
  return out;
}

Tensor vib_regularizer(std::span<const GateState> states) {
  double total = 0.0;
  for (const auto& st : states) {
    auto m = st.mu.data();
    auto s = st.sigma.data();
    for (std::size_t i = 0; i < m.size(); ++i) total += std::log1p(double(m[i]) * m[i] / (double(s[i]) * s[i]));
  }
  Tensor out = Tensor::scalar(static_cast<float>(total));
  std::vector<Tensor> mus, sigmas, inputs;
  for (const auto& st : states) {
    mus.push_back(st.mu);
    sigmas.push_back(st.sigma);
    inputs.push_back(st.mu);
    inputs.push_back(st.sigma);
  }
  Tape::current().record(out, std::span<const Tensor>(inputs), [mus = mus, sigmas = sigmas](const Tensor& o) mutable {
    const double g = o.grad()[0];
    for (std::size_t l = 0; l < mus.size(); ++l) {
      auto m = mus[l].data();
      auto s = sigmas[l].data();
      std::span<float> mg = mus[l].requires_grad() ? mus[l].grad() : std::span<float>{};
      std::span<float> sg = sigmas[l].requires_grad() ? sigmas[l].grad() : std::span<float>{};
      for (std::size_t i = 0; i < m.size(); ++i) {
        const double mu = m[i], sd = s[i];
        const double denom = sd * sd + mu * mu;
        if (!mg.empty()) mg[i] += static_cast<float>(g * 2.0 * mu / denom);
        if (!sg.empty()) sg[i] += static_cast<float>(g * -2.0 * mu * mu / (sd * denom));
      }
    }
  });
  return out;
}

double hard_prune_ratio(const GateState& state) {
  const std::size_t c = state.channels();
  std::size_t pruned = 0;
  for (std::size_t i = 0; i < c; ++i) {
    if (state.alpha(i) < state.alpha_th) ++pruned;
  }
  return static_cast<double>(pruned) / static_cast<double>(c);
}

Tensor soft_prune_ratio(const GateState& state, SoftPruneForm form) {
  const std::size_t c = state.channels();
  const double sign = form == SoftPruneForm::kIndicator ? 1.0 : -1.0;
  const double tau = state.tau;
  const double th = state.alpha_th;
  std::vector<double> sig(c);
  double total = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    sig[i] = stable_sigmoid(sign * (th - state.alpha(i)) / tau);
    total += sig[i];
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(c)));
  Tensor mu = state.mu, sigma = state.sigma;
  Tape::current().record(out, {mu, sigma}, [mu = mu, sigma = sigma, sig = std::move(sig), sign = sign, tau = tau, c = c](const Tensor& o) mutable {
    const double g = o.grad()[0] / static_cast<double>(c);
    auto m = mu.data();
    auto s = sigma.data();
    std::span<float> mg = mu.requires_grad() ? mu.grad() : std::span<float>{};
    std::span<float> sg = sigma.requires_grad() ? sigma.grad() : std::span<float>{};
    for (std::size_t i = 0; i < c; ++i) {
      // d/d alpha of sigmoid(sign * (th - alpha) / tau)
      const double dsig_dalpha = -sign / tau * sig[i] * (1.0 - sig[i]);
      const double mv = m[i], sv = s[i];
      if (!mg.empty()) mg[i] += static_cast<float>(g * dsig_dalpha * 2.0 * mv / (sv * sv));
      if (!sg.empty()) sg[i] += static_cast<float>(g * dsig_dalpha * -2.0 * mv * mv / (sv * sv * sv));
    }
  });
  return out;
}

}  // namespace djpq
