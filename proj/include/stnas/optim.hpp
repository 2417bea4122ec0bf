#pragma once

#include <cstdint>
#include <vector>

#include "stnas/nn.hpp"

namespace stnas {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// L2 penalty folded into the gradient before the moment updates.
  double weight_decay = 0.0;
};

/// Adaptive-moment optimizer over a fixed parameter list.
class Adam {
 public:
  Adam(ParamList params, AdamConfig config);

  /// Applies one update. Returns false (and leaves parameters untouched) if any gradient is non-finite.
  bool step();
  void zero_grad() { zero_grads(params_); }

  const ParamList& params() const noexcept { return params_; }
  const AdamConfig& config() const noexcept { return config_; }
  std::int64_t steps() const noexcept { return steps_; }

  /// Moment buffers named "<prefix>m/<param>" and "<prefix>v/<param>".
  void collect_state(const std::string& prefix, BufferList& out);
  void set_steps(std::int64_t steps) { steps_ = steps; }

 private:
  ParamList params_;
  AdamConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::int64_t steps_ = 0;
};

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
double clip_grad_norm(const ParamList& params, double max_norm);

}  // namespace stnas
