#include "djpq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "djpq/errors.hpp"

namespace djpq {

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool has_grad = false;
  bool requires_grad = false;
};

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill, bool requires_grad) : impl_(std::make_shared<TensorImpl>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad) : impl_(std::make_shared<TensorImpl>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                         " elements, got " + std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
  check_finite("tensor construction");
}

Tensor Tensor::scalar(float value, bool requires_grad) { return Tensor(Shape{1}, std::vector<float>{value}, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<float> Tensor::data() { return impl_->data; }
std::span<const float> Tensor::data() const { return impl_->data; }

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }

bool Tensor::has_grad() const { return impl_->has_grad; }

std::span<float> Tensor::grad() {
  if (!impl_->has_grad) {
    impl_->grad.assign(impl_->data.size(), 0.0f);
    impl_->has_grad = true;
  }
  return impl_->grad;
}

std::span<const float> Tensor::grad() const {
  if (!impl_->has_grad) throw ContractError("tensor " + shape_str(shape()) + " has no gradient");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_->has_grad) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

void Tensor::clear_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
  impl_->has_grad = false;
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

Tensor Tensor::reshape(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_str(impl_->shape) + " to " + shape_str(shape));
  }
  // Copy plus an identity tape entry, so gradients flow back to the source.
  if (shape == impl_->shape) return *this;
  Tensor out(std::move(shape));
  std::copy(impl_->data.begin(), impl_->data.end(), out.impl_->data.begin());
  Tensor in = *this;
  Tape::current().record(out, {in}, [in = in](const Tensor& o) mutable {
    auto g = in.grad();
    auto og = o.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += og[i];
  });
  return out;
}

void Tensor::check_finite(const std::string& what) const {
  const auto& d = impl_->data;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      throw DataError(what + ": non-finite value at flat index " + std::to_string(i) + " of tensor " +
                      shape_str(impl_->shape));
    }
  }
}

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

bool Tape::record(Tensor& out, std::initializer_list<Tensor> inputs, BackwardFn fn) {
  return record(out, std::span<const Tensor>(inputs.begin(), inputs.size()), std::move(fn));
}

bool Tape::record(Tensor& out, std::span<const Tensor> inputs, BackwardFn fn) {
  if (!g_grad_enabled) return false;
  bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!any) return false;
  out.set_requires_grad(true);
  entries_.push_back(Entry{out, std::move(fn)});
  return true;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw ContractError("backward() on a loss that does not depend on any parameter");
  Tensor seed = loss;
  seed.grad()[0] += 1.0f;
  auto entries = std::move(entries_);
  entries_.clear();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    if (!it->out.has_grad()) continue;
    it->fn(it->out);
  }
}

void backward(const Tensor& loss) { Tape::current().backward(loss); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

}  // namespace djpq
