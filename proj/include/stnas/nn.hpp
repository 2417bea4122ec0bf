#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "stnas/autograd.hpp"
#include "stnas/tensor.hpp"

namespace stnas {

struct NamedParam {
  std::string name;
  ag::Var var;
};

struct NamedBuffer {
  std::string name;
  Tensor* tensor;
};

using ParamList = std::vector<NamedParam>;
using BufferList = std::vector<NamedBuffer>;

/// Seeded weight initializer; every draw advances the same engine so a
/// construction order fixes all initial values.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  /// Glorot-uniform weights.
  ag::Var xavier(Shape shape, std::int64_t fan_in, std::int64_t fan_out);
  ag::Var normal(Shape shape, double stddev);
  ag::Var zeros(Shape shape);

  std::uint64_t next_seed() { return rng_(); }

 private:
  std::mt19937_64 rng_;
};

/// Per-channel normalization without affine parameters.
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(std::int64_t channels) : running_mean_(Shape{channels}, 0.0), running_var_(Shape{channels}, 1.0) {}

  ag::Var forward(const ag::Var& x, bool training) {
    return ag::batch_norm(x, running_mean_, running_var_, training);
  }
  void collect_buffers(const std::string& prefix, BufferList& out) {
    out.push_back({prefix + "running_mean", &running_mean_});
    out.push_back({prefix + "running_var", &running_var_});
  }

 private:
  Tensor running_mean_;
  Tensor running_var_;
};

void set_requires_grad(const ParamList& params, bool on);
void zero_grads(const ParamList& params);
std::int64_t count_elements(const ParamList& params);
/// FNV-1a over the raw bytes of all parameter values, in list order.
std::uint64_t checksum(const ParamList& params);

}  // namespace stnas
