#pragma once

// Dense row-major tensors with a define-by-run reverse-mode tape.
//
// Every op that sees at least one input with requires_grad() (while grad
// mode is on) records its parents and a backward closure on the result
// node. The graph is owned by the result handles, so dropping the loss
// releases the whole tape.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "mixdiv/errors.hpp"
#include "mixdiv/rng.hpp"

namespace mixdiv {

using Shape = std::vector<std::size_t>;
// One byte per position: nonzero means "real token".
using Mask = std::vector<std::uint8_t>;

std::string shape_str(const Shape& shape);

// Vectorized Eigen kernels split loops at alignment boundaries, so the
// rounding of a result depends on where its operands live. Cache-line
// aligned storage makes every kernel see the same split on every run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;
std::size_t shape_numel(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

}  // namespace detail

bool grad_enabled();

// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace debug {
// Negative control for gradient checking: perturbs the GELU backward rule.
void set_corrupt_gelu_gradient(bool on);
bool corrupt_gelu_gradient();
}  // namespace debug

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodeT = detail::Node<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<NodeT> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value);
  static Tensor from(Shape shape, Buffer<T> data, bool requires_grad = false);
  template <typename Alloc>
  static Tensor from(Shape shape, const std::vector<T, Alloc>& data, bool requires_grad = false) {
    return from(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad);
  }
  static Tensor scalar(T value) { return from({1}, {value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T at(std::size_t row, std::size_t col) const { return node_->data[row * node_->shape[1] + col]; }

  bool requires_grad() const { return node_->requires_grad; }
  // Turns a leaf into a tracked parameter (allocating a zero grad) or back.
  void set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void zero_grad();

  // Fresh leaf holding a copy of the values.
  Tensor detach() const;
  template <typename U>
  Tensor<U> cast() const {
    Buffer<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>::from(node_->shape, std::move(out));
  }

  // Reverse sweep from a scalar; accumulates into every tracked leaf.
  void backward() const;

  const std::shared_ptr<NodeT>& node() const { return node_; }

 private:
  std::shared_ptr<NodeT> node_;
};

// Attention over a flattened batch. q is [batch*q_len x d]; k and v are
// [batch*k_len x d]. Query row i of an example sees key j when key_valid
// allows it and, for causal attention, j <= i + causal_offset.
struct AttentionSpec {
  std::size_t batch = 1;
  std::size_t q_len = 0;
  std::size_t k_len = 0;
  std::size_t heads = 1;
  bool causal = false;
  std::size_t causal_offset = 0;
  Mask key_valid;  // batch*k_len entries; empty means all valid
};

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
// x [m x n] + bias [n] broadcast over rows.
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);
// Row r of x multiplied by the constant weights[r].
template <typename T> Tensor<T> scale_rows(const Tensor<T>& x, std::span<const T> weights);
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5));
template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T> Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids);
// Inverted dropout; identity when rate == 0.
template <typename T> Tensor<T> dropout(const Tensor<T>& x, double rate, RngStream& rng);
template <typename T> Tensor<T> concat_rows(std::span<const Tensor<T>> parts);
template <typename T> Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionSpec& spec);
// Mean over unmasked rows of -sum_v labels(v) * log softmax(logits)(v).
template <typename T>
Tensor<T> cross_entropy_soft(const Tensor<T>& logits, const Tensor<T>& soft_labels, const Mask& position_mask);

}  // namespace mixdiv
