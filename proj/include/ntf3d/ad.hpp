// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over dense fp64 tensors.
//
// A Tensor is a shared handle to a graph node. Operations record their inputs
// and a backward closure when any input requires a gradient and grad mode is
// enabled; otherwise they produce plain constants. Tensors are row-major.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ntf3d::ad {

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  // Negative axes count from the back.
  std::int64_t size(int axis) const;

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  double item() const;
  double at(std::int64_t flat_index) const { return node_->value[static_cast<size_t>(flat_index)]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  // New leaf holding a copy of the value.
  Tensor detach() const;
  // Seeds d(this)/d(this) = 1 (scalar only) and back-propagates to every leaf
  // that requires grad. Leaf gradients accumulate across calls.
  void backward() const;
  void zero_grad() { node_->grad.clear(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds an op result. The backward closure is attached only when grad mode is
// on and at least one input requires a gradient.
Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward);

// Accumulation target for input `k` of `self`, or nullptr if that input needs
// no gradient.
inline double* grad_target(Node& self, size_t k) {
  Node& in = *self.inputs[k];
  if (!in.requires_grad) return nullptr;
  return in.ensure_grad().data();
}

// ---- elementwise ---------------------------------------------------------
// Binary ops broadcast `b` over `a` when b is a scalar or b's shape equals the
// trailing dimensions of a's shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);

// ---- shape ---------------------------------------------------------------
Tensor reshape(const Tensor& x, Shape shape);
// Concatenates along the last axis; leading dimensions must agree.
Tensor concat_last(const std::vector<Tensor>& parts);
// Concatenates along the first axis; trailing dimensions must agree.
Tensor concat_first(const std::vector<Tensor>& parts);
Tensor slice_last(const Tensor& x, std::int64_t begin, std::int64_t end);
// Rows of a rank-2 tensor.
Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& rows);
Tensor transpose(const Tensor& x);

// ---- reductions ----------------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// [N, M] -> [M]
Tensor sum_rows(const Tensor& x);
// [N, M] -> [N]
Tensor row_sums(const Tensor& x);
// [N, M] -> [N], Euclidean norm per row.
Tensor row_norms(const Tensor& x);
// [N, M] -> [N, M], each row scaled to unit L2 norm.
Tensor normalize_rows(const Tensor& x);
// [N, M] * [N] -> [N, M]
Tensor mul_rowwise(const Tensor& x, const Tensor& s);

// ---- linear algebra ------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
// Rows of `a` [V, H] added to every row of `c` [B, H] -> [B * V, H] with
// output row b * V + v = a[v] + c[b].
Tensor outer_add(const Tensor& a, const Tensor& c);
// Mean over i of logsumexp(logits[i, :]) - logits[i, i]; logits is [B, B].
Tensor cross_entropy_diag(const Tensor& logits);

// ---- image / point ops ---------------------------------------------------
// NHWC 3x3 convolution, stride 1, zero padding 1. weight [9 * C, O], bias [O].
Tensor conv3x3(const Tensor& x, const Tensor& weight, const Tensor& bias);
// NHWC average pooling with a k x k window and stride k.
Tensor avg_pool(const Tensor& x, int k);
// [G * N, C] -> [G, C], elementwise max over each group of N rows.
Tensor max_groups(const Tensor& x, std::int64_t groups);

}  // namespace ntf3d::ad
