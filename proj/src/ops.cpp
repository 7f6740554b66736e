#include "djpq/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "djpq/errors.hpp"

namespace djpq {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void accumulate(Tensor& target, std::span<const float> g, float factor = 1.0f) {
  if (!target.requires_grad()) return;
  auto tg = target.grad();
  for (std::size_t i = 0; i < tg.size(); ++i) tg[i] += factor * g[i];
}

// Unfolds one sample [C,H,W] into columns [C*kh*kw, Ho*Wo].
void im2col(const float* img, int channels, int height, int width, int kh, int kw, int stride, int pad, int out_h,
            int out_w, float* col) {
  const int plane = out_h * out_w;
  for (int c = 0; c < channels; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        float* row = col + ((c * kh + i) * kw + j) * plane;
        for (int oy = 0; oy < out_h; ++oy) {
          const int y = oy * stride - pad + i;
          for (int ox = 0; ox < out_w; ++ox) {
            const int x = ox * stride - pad + j;
            row[oy * out_w + ox] =
                (y >= 0 && y < height && x >= 0 && x < width) ? img[(c * height + y) * width + x] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im(const float* col, int channels, int height, int width, int kh, int kw, int stride, int pad, int out_h,
            int out_w, float* img) {
  const int plane = out_h * out_w;
  for (int c = 0; c < channels; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const float* row = col + ((c * kh + i) * kw + j) * plane;
        for (int oy = 0; oy < out_h; ++oy) {
          const int y = oy * stride - pad + i;
          if (y < 0 || y >= height) continue;
          for (int ox = 0; ox < out_w; ++ox) {
            const int x = ox * stride - pad + j;
            if (x >= 0 && x < width) img[(c * height + y) * width + x] += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto o = out.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] + bd[i];
  Tape::current().record(out, {a, b}, [a = a, b = b](const Tensor& o) mutable {
    accumulate(a, o.grad());
    accumulate(b, o.grad());
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  auto o = out.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] - bd[i];
  Tape::current().record(out, {a, b}, [a = a, b = b](const Tensor& o) mutable {
    accumulate(a, o.grad());
    accumulate(b, o.grad(), -1.0f);
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  if (!a_scalar && !b_scalar) require_same_shape(a, b, "mul");
  const Shape shape = a_scalar ? b.shape() : a.shape();
  Tensor out(shape);
  auto o = out.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[a_scalar ? 0 : i] * bd[b_scalar ? 0 : i];
  Tape::current().record(out, {a, b}, [a = a, b = b, a_scalar = a_scalar, b_scalar = b_scalar](const Tensor& o) mutable {
    auto og = o.grad();
    auto ad = a.data();
    auto bd = b.data();
    if (a.requires_grad()) {
      auto ag = a.grad();
      for (std::size_t i = 0; i < og.size(); ++i) ag[a_scalar ? 0 : i] += og[i] * bd[b_scalar ? 0 : i];
    }
    if (b.requires_grad()) {
      auto bg = b.grad();
      for (std::size_t i = 0; i < og.size(); ++i) bg[b_scalar ? 0 : i] += og[i] * ad[a_scalar ? 0 : i];
    }
  });
  return out;
}

Tensor scale(const Tensor& a, float factor) {
  Tensor out(a.shape());
  auto o = out.data();
  auto ad = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * factor;
  Tape::current().record(out, {a}, [a = a, factor = factor](const Tensor& o) mutable { accumulate(a, o.grad(), factor); });
  return out;
}

Tensor add_scalar(const Tensor& a, float value) {
  Tensor out(a.shape());
  auto o = out.data();
  auto ad = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] + value;
  Tape::current().record(out, {a}, [a = a](const Tensor& o) mutable { accumulate(a, o.grad()); });
  return out;
}

Tensor square(const Tensor& a) {
  Tensor out(a.shape());
  auto o = out.data();
  auto ad = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * ad[i];
  Tape::current().record(out, {a}, [a = a](const Tensor& o) mutable {
    auto ag = a.grad();
    auto ad = a.data();
    auto og = o.grad();
    for (std::size_t i = 0; i < ag.size(); ++i) ag[i] += 2.0f * ad[i] * og[i];
  });
  return out;
}

Tensor sum(const Tensor& a) {
  float total = 0.0f;
  for (float v : a.data()) total += v;
  Tensor out = Tensor::scalar(total);
  Tape::current().record(out, {a}, [a = a](const Tensor& o) mutable {
    const float g = o.grad()[0];
    auto ag = a.grad();
    for (auto& v : ag) v += g;
  });
  return out;
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  if (input.rank() != 4 || weight.rank() != 4 || weight.dim(1) != input.dim(1)) {
    throw DimensionError("conv2d: input " + shape_str(input.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
  }
  if (stride < 1 || padding < 0) throw ContractError("conv2d: stride must be >= 1 and padding >= 0");
  const int n = static_cast<int>(input.dim(0));
  const int cin = static_cast<int>(input.dim(1));
  const int h = static_cast<int>(input.dim(2));
  const int w = static_cast<int>(input.dim(3));
  const int cout = static_cast<int>(weight.dim(0));
  const int kh = static_cast<int>(weight.dim(2));
  const int kw = static_cast<int>(weight.dim(3));
  if (bias.defined() && (bias.rank() != 1 || static_cast<int>(bias.dim(0)) != cout)) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  if (h + 2 * padding < kh || w + 2 * padding < kw) {
    throw DimensionError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " +
                         shape_str(input.shape()));
  }
  const int oh = (h + 2 * padding - kh) / stride + 1;
  const int ow = (w + 2 * padding - kw) / stride + 1;
  const int k = cin * kh * kw;
  const int plane = oh * ow;

  Tensor out(Shape{static_cast<std::size_t>(n), static_cast<std::size_t>(cout), static_cast<std::size_t>(oh),
                   static_cast<std::size_t>(ow)});
  std::vector<float> col(static_cast<std::size_t>(k) * plane);
  ConstMapMat wmat(weight.data().data(), cout, k);
  for (int s = 0; s < n; ++s) {
    im2col(input.data().data() + static_cast<std::size_t>(s) * cin * h * w, cin, h, w, kh, kw, stride, padding, oh,
           ow, col.data());
    MapMat omat(out.data().data() + static_cast<std::size_t>(s) * cout * plane, cout, plane);
    omat.noalias() = wmat * ConstMapMat(col.data(), k, plane);
    if (bias.defined()) {
      auto b = bias.data();
      for (int c = 0; c < cout; ++c) omat.row(c).array() += b[c];
    }
  }

  Tape::current().record(
      out, {input, weight, bias},
      [input = input, weight = weight, bias = bias, stride = stride, padding = padding, n = n, cin = cin, h = h, w = w, cout = cout, kh = kh, kw = kw, oh = oh, ow = ow, k = k, plane = plane](const Tensor& o) mutable {
        auto og = o.grad();
        std::vector<float> col(static_cast<std::size_t>(k) * plane);
        std::vector<float> dcol(static_cast<std::size_t>(k) * plane);
        ConstMapMat wmat(weight.data().data(), cout, k);
        const bool need_w = weight.requires_grad();
        const bool need_x = input.requires_grad();
        for (int s = 0; s < n; ++s) {
          ConstMapMat gmat(og.data() + static_cast<std::size_t>(s) * cout * plane, cout, plane);
          if (need_w) {
            im2col(input.data().data() + static_cast<std::size_t>(s) * cin * h * w, cin, h, w, kh, kw, stride, padding,
                   oh, ow, col.data());
            MapMat dw(weight.grad().data(), cout, k);
            dw.noalias() += gmat * ConstMapMat(col.data(), k, plane).transpose();
          }
          if (need_x) {
            MapMat dc(dcol.data(), k, plane);
            dc.noalias() = wmat.transpose() * gmat;
            col2im(dcol.data(), cin, h, w, kh, kw, stride, padding, oh, ow,
                   input.grad().data() + static_cast<std::size_t>(s) * cin * h * w);
          }
          if (bias.defined() && bias.requires_grad()) {
            auto bg = bias.grad();
            for (int c = 0; c < cout; ++c) bg[c] += gmat.row(c).sum();
          }
        }
      });
  return out;
}

Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (input.rank() != 2 || weight.rank() != 2 || input.dim(1) != weight.dim(0)) {
    throw DimensionError("dense: input " + shape_str(input.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
  }
  const auto n = static_cast<Eigen::Index>(input.dim(0));
  const auto f = static_cast<Eigen::Index>(input.dim(1));
  const auto g = static_cast<Eigen::Index>(weight.dim(1));
  if (bias.defined() && (bias.rank() != 1 || static_cast<Eigen::Index>(bias.dim(0)) != g)) {
    throw DimensionError("dense: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  Tensor out(Shape{input.dim(0), weight.dim(1)});
  MapMat omat(out.data().data(), n, g);
  omat.noalias() = ConstMapMat(input.data().data(), n, f) * ConstMapMat(weight.data().data(), f, g);
  if (bias.defined()) {
    auto b = bias.data();
    for (Eigen::Index j = 0; j < g; ++j) omat.col(j).array() += b[j];
  }
  Tape::current().record(out, {input, weight, bias}, [input = input, weight = weight, bias = bias, n = n, f = f, g = g](const Tensor& o) mutable {
    ConstMapMat gmat(o.grad().data(), n, g);
    if (input.requires_grad()) {
      MapMat(input.grad().data(), n, f).noalias() += gmat * ConstMapMat(weight.data().data(), f, g).transpose();
    }
    if (weight.requires_grad()) {
      MapMat(weight.grad().data(), f, g).noalias() += ConstMapMat(input.data().data(), n, f).transpose() * gmat;
    }
    if (bias.defined() && bias.requires_grad()) {
      auto bg = bias.grad();
      for (Eigen::Index j = 0; j < g; ++j) bg[j] += gmat.col(j).sum();
    }
  });
  return out;
}

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats, BnMode mode) {
  if (input.rank() != 4 && input.rank() != 2) {
    throw DimensionError("batchnorm2d: expected [N,C,H,W] or [N,C], got " + shape_str(input.shape()));
  }
  const std::size_t n = input.dim(0);
  const std::size_t c = input.dim(1);
  const std::size_t spatial = input.rank() == 4 ? input.dim(2) * input.dim(3) : 1;
  if (gamma.numel() != c || beta.numel() != c || stats.running_mean.size() != c || stats.running_var.size() != c) {
    throw DimensionError("batchnorm2d: parameter length does not match channels of " + shape_str(input.shape()));
  }
  if (!(stats.epsilon > 0.0f)) throw ConfigError("batchnorm2d: epsilon must be positive");
  const std::size_t count = n * spatial;
  if (mode == BnMode::kTrain && count < 2) {
    throw ContractError("batchnorm2d: train mode needs at least 2 values per channel, got " + std::to_string(count));
  }

  auto x = input.data();
  std::vector<float> mean(c), invstd(c);
  if (mode == BnMode::kTrain) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      float s = 0.0f;
      for (std::size_t i = 0; i < n; ++i) {
        const float* p = x.data() + (i * c + ch) * spatial;
        for (std::size_t j = 0; j < spatial; ++j) s += p[j];
      }
      const float m = s / static_cast<float>(count);
      float v = 0.0f;
      for (std::size_t i = 0; i < n; ++i) {
        const float* p = x.data() + (i * c + ch) * spatial;
        for (std::size_t j = 0; j < spatial; ++j) v += (p[j] - m) * (p[j] - m);
      }
      const float var = v / static_cast<float>(count);
      mean[ch] = m;
      invstd[ch] = 1.0f / std::sqrt(var + stats.epsilon);
      const float unbiased = v / static_cast<float>(count - 1);
      stats.running_mean[ch] = (1.0f - stats.momentum) * stats.running_mean[ch] + stats.momentum * m;
      stats.running_var[ch] = (1.0f - stats.momentum) * stats.running_var[ch] + stats.momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = stats.running_mean[ch];
      invstd[ch] = 1.0f / std::sqrt(stats.running_var[ch] + stats.epsilon);
    }
  }

  Tensor out(input.shape());
  std::vector<float> xhat(x.size());
  auto o = out.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * spatial;
      for (std::size_t j = 0; j < spatial; ++j) {
        const float xh = (x[base + j] - mean[ch]) * invstd[ch];
        xhat[base + j] = xh;
        o[base + j] = gd[ch] * xh + bd[ch];
      }
    }
  }

  Tape::current().record(out, {input, gamma, beta},
                         [input = input, gamma = gamma, beta = beta, xhat = std::move(xhat), invstd = std::move(invstd), n = n, c = c, spatial = spatial, count = count, mode = mode](const Tensor& o) mutable {
                           auto og = o.grad();
                           auto gd = gamma.data();
                           std::vector<float> dbeta(c, 0.0f), dgamma(c, 0.0f);
                           for (std::size_t i = 0; i < n; ++i) {
                             for (std::size_t ch = 0; ch < c; ++ch) {
                               const std::size_t base = (i * c + ch) * spatial;
                               for (std::size_t j = 0; j < spatial; ++j) {
                                 dbeta[ch] += og[base + j];
                                 dgamma[ch] += og[base + j] * xhat[base + j];
                               }
                             }
                           }
                           if (gamma.requires_grad()) {
                             auto g = gamma.grad();
                             for (std::size_t ch = 0; ch < c; ++ch) g[ch] += dgamma[ch];
                           }
                           if (beta.requires_grad()) {
                             auto g = beta.grad();
                             for (std::size_t ch = 0; ch < c; ++ch) g[ch] += dbeta[ch];
                           }
                           if (!input.requires_grad()) return;
                           auto ig = input.grad();
                           const float m = static_cast<float>(count);
                           for (std::size_t i = 0; i < n; ++i) {
                             for (std::size_t ch = 0; ch < c; ++ch) {
                               const std::size_t base = (i * c + ch) * spatial;
                               const float k = gd[ch] * invstd[ch];
                               for (std::size_t j = 0; j < spatial; ++j) {
                                 if (mode == BnMode::kTrain) {
                                   ig[base + j] +=
                                       k / m * (m * og[base + j] - dbeta[ch] - xhat[base + j] * dgamma[ch]);
                                 } else {
                                   ig[base + j] += k * og[base + j];
                                 }
                               }
                             }
                           }
                         });
  return out;
}

Tensor relu(const Tensor& input) {
  Tensor out(input.shape());
  auto o = out.data();
  auto x = input.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > 0.0f ? x[i] : 0.0f;
  Tape::current().record(out, {input}, [input = input](const Tensor& o) mutable {
    auto g = input.grad();
    auto x = input.data();
    auto og = o.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0f) g[i] += og[i];
    }
  });
  return out;
}

Tensor maxpool2d(const Tensor& input, int window, int stride, int padding) {
  if (input.rank() != 4) throw DimensionError("maxpool2d: expected [N,C,H,W], got " + shape_str(input.shape()));
  if (window < 1 || stride < 1 || padding < 0 || padding >= window) {
    throw ContractError("maxpool2d: need window >= 1, stride >= 1, 0 <= padding < window");
  }
  const std::size_t n = input.dim(0), c = input.dim(1);
  const int h = static_cast<int>(input.dim(2)), w = static_cast<int>(input.dim(3));
  if (h + 2 * padding < window || w + 2 * padding < window) {
    throw DimensionError("maxpool2d: window " + std::to_string(window) + " larger than input " +
                         shape_str(input.shape()));
  }
  const int oh = (h + 2 * padding - window) / stride + 1;
  const int ow = (w + 2 * padding - window) / stride + 1;
  Tensor out(Shape{n, c, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
  std::vector<std::size_t> argmax(out.numel());
  auto x = input.data();
  auto o = out.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const float* src = x.data() + plane * h * w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        float best = -std::numeric_limits<float>::infinity();
        std::size_t best_idx = 0;
        bool found = false;
        for (int i = 0; i < window; ++i) {
          const int y = oy * stride - padding + i;
          if (y < 0 || y >= h) continue;
          for (int j = 0; j < window; ++j) {
            const int xx = ox * stride - padding + j;
            if (xx < 0 || xx >= w) continue;
            const float v = src[y * w + xx];
            if (!found || v > best) {
              best = v;
              best_idx = plane * h * w + static_cast<std::size_t>(y * w + xx);
              found = true;
            }
          }
        }
        const std::size_t oi = (plane * oh + oy) * ow + ox;
        o[oi] = best;
        argmax[oi] = best_idx;
      }
    }
  }
  Tape::current().record(out, {input}, [input = input, argmax = std::move(argmax)](const Tensor& o) mutable {
    auto g = input.grad();
    auto og = o.grad();
    for (std::size_t i = 0; i < og.size(); ++i) g[argmax[i]] += og[i];
  });
  return out;
}

Tensor global_avgpool(const Tensor& input) {
  if (input.rank() != 4) throw DimensionError("global_avgpool: expected [N,C,H,W], got " + shape_str(input.shape()));
  const std::size_t n = input.dim(0), c = input.dim(1), spatial = input.dim(2) * input.dim(3);
  Tensor out(Shape{n, c});
  auto x = input.data();
  auto o = out.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    float s = 0.0f;
    for (std::size_t j = 0; j < spatial; ++j) s += x[p * spatial + j];
    o[p] = s / static_cast<float>(spatial);
  }
  Tape::current().record(out, {input}, [input = input, spatial = spatial](const Tensor& o) mutable {
    auto g = input.grad();
    auto og = o.grad();
    const float inv = 1.0f / static_cast<float>(spatial);
    for (std::size_t p = 0; p < og.size(); ++p) {
      for (std::size_t j = 0; j < spatial; ++j) g[p * spatial + j] += og[p] * inv;
    }
  });
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw DataError("softmax_cross_entropy: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                      " outside [0, " + std::to_string(k) + ")");
    }
  }
  auto z = logits.data();
  std::vector<float> prob(n * k);
  float total = 0.0f;
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = z.data() + i * k;
    const float mx = *std::max_element(row, row + k);
    float denom = 0.0f;
    for (std::size_t j = 0; j < k; ++j) {
      prob[i * k + j] = std::exp(row[j] - mx);
      denom += prob[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) prob[i * k + j] /= denom;
    total += -(row[labels[i]] - mx - std::log(denom));
  }
  Tensor out = Tensor::scalar(total / static_cast<float>(n));
  std::vector<int> lbl(labels.begin(), labels.end());
  Tape::current().record(out, {logits}, [logits = logits, prob = std::move(prob), lbl = std::move(lbl), n = n, k = k](const Tensor& o) mutable {
    const float g = o.grad()[0] / static_cast<float>(n);
    auto lg = logits.grad();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        lg[i * k + j] += g * (prob[i * k + j] - (static_cast<int>(j) == lbl[i] ? 1.0f : 0.0f));
      }
    }
  });
  return out;
}

double accuracy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("accuracy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                         " labels");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  auto z = logits.data();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = z.data() + i * k;
    const auto best = static_cast<int>(std::max_element(row, row + k) - row);
    if (best == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

void sgd_step(Tensor& param, float lr, float lr_scale) {
  if (!param.has_grad()) throw ContractError("sgd_step: parameter " + shape_str(param.shape()) + " has no gradient");
  auto p = param.data();
  auto g = param.grad();
  const float step = lr * lr_scale;
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= step * g[i];
  param.zero_grad();
}

}  // namespace djpq
