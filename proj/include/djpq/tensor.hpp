#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace djpq {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

// Dense float32 tensor with an optional gradient buffer.
//
// Tensor is a shared handle: copies alias the same storage, the way
// parameters are shared between a network and its optimizer. Use clone()
// for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f, bool requires_grad = false);
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<float> data();
  std::span<const float> data() const;
  float item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  // Allocates a zero gradient buffer if none exists.
  std::span<float> grad();
  std::span<const float> grad() const;
  void zero_grad();
  void clear_grad();

  // Storage copy that does not require grad and is not on the tape.
  Tensor detach() const;
  // Deep copy preserving requires_grad (gradient buffer is not copied).
  Tensor clone() const;
  // Differentiable reshape (returns *this when the shape is unchanged).
  Tensor reshape(Shape shape) const;

  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

  // Throws DataError naming `what` if any element is NaN or Inf.
  void check_finite(const std::string& what) const;

 private:
  friend class Tape;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

// Reverse-mode tape. Entries are appended in creation order during the
// forward pass; backward() replays them in reverse.
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& out)>;

  // The tape of the calling thread.
  static Tape& current();

  // Records `fn` if any input requires grad and recording is enabled.
  // Marks `out` as requiring grad in that case. Returns whether it recorded.
  bool record(Tensor& out, std::initializer_list<Tensor> inputs, BackwardFn fn);
  bool record(Tensor& out, std::span<const Tensor> inputs, BackwardFn fn);

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
  // requires_grad tensor reachable from the tape. Clears the tape.
  void backward(const Tensor& loss);

 private:
  struct Entry {
    Tensor out;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
};

void backward(const Tensor& loss);

// RAII switch that disables tape recording on this thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

}  // namespace djpq
