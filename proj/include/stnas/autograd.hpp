#pragma once

// Minimal reverse-mode automatic differentiation over stnas::Tensor.
//
// A Var is a handle to a graph node. Leaf Vars created with requires_grad
// accumulate gradients across backward() calls until zero_grad(). Interior
// nodes only record a backward closure when at least one input requires a
// gradient, so evaluation with frozen parameters builds no graph.

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "stnas/tensor.hpp"

namespace stnas::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t dim(std::size_t axis) const { return node_->value.dim(axis); }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  /// Gradient accumulated by backward(); empty tensor if none yet.
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() { return node_->ensure_grad(); }
  void zero_grad();

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  friend Var make_var(Tensor, const std::vector<Var>&, std::function<void(Node&)>);
  std::shared_ptr<Node> node_;
};

/// Builds an interior node; `backward` receives the output node whose grad is populated.
Var make_var(Tensor value, const std::vector<Var>& parents, std::function<void(Node&)> backward);

/// Runs reverse accumulation from a single-element output, seeding d(out)/d(out) = 1.
void backward(const Var& output);

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// y = s * x + c with constant s, c.
Var affine(const Var& x, double s, double c);
Var relu(const Var& x);
Var sigmoid(const Var& x);

/// Sum of same-shape inputs; undefined entries count as zeros.
Var sum_n(const std::vector<Var>& xs);
/// y = sum_i w[i] * xs[i] with w a 1-D Var of length xs.size(); undefined xs are skipped.
Var weighted_sum(const std::vector<Var>& xs, const Var& w);
/// softmax(v / tau) over a 1-D Var.
Var softmax(const Var& v, double tau = 1.0);

// Reductions and losses.
Var sum(const Var& x);
Var mean_abs_error(const Var& pred, const Tensor& target);
Var mean_squared_error(const Var& pred, const Tensor& target);
/// sum_i c[i] * x[i] for a constant coefficient tensor of the same size.
Var dot_const(const Var& x, const Tensor& c);

// Shape manipulation.
Var reshape(const Var& x, Shape shape);
Var slice_last(const Var& x, std::int64_t start, std::int64_t len);
Var concat_last(const std::vector<Var>& xs);
/// out[..., i] = x[..., perm[i]].
Var permute_last(const Var& x, const std::vector<std::int64_t>& perm);
/// [A, B, C, D] -> [A, C, B, D].
Var swap_axes12(const Var& x);
/// [A, B, C, D] -> [A, B, D], picking index `c` along axis 2.
Var select_axis2(const Var& x, std::int64_t c);

// Layers.
/// x[..., Din] * w[Din, Dout] (+ b[Dout]).
Var linear(const Var& x, const Var& w, const Var& b = Var());
/// Causal convolution along axis 2 of x[B, N, T, Din] with w[k, Din, Dout], left zero padding (k-1)*dilation.
Var causal_conv(const Var& x, const Var& w, const Var& b, std::int64_t dilation);
/// out[b, n, t, :] = sum_m s[n, m] * x[b, m, t, :] for a constant matrix s[N, N].
Var graph_conv(const Var& x, const Tensor& s);
/// Normalizes each channel of the last axis over all other axes. Running stats are updated in training mode.
Var batch_norm(const Var& x, Tensor& running_mean, Tensor& running_var, bool training,
               double momentum = 0.1, double eps = 1e-5);

/// Scaled dot-product attention over axis 1 of q/k/v[G, L, C] split into `heads` heads.
///
/// `selected` holds G*heads*L flags ([g][h][l]); a query position with flag 0
/// outputs the mean of the value vectors instead of attending. An empty
/// `selected` means every query attends.
Var attention(const Var& q, const Var& k, const Var& v, std::int64_t heads,
              const std::vector<std::uint8_t>& selected);

}  // namespace stnas::ag
