#pragma once

#include <cstdint>
#include <string>

#include "stnas/autograd.hpp"
#include "stnas/nn.hpp"
#include "stnas/operators.hpp"

namespace stnas {

/// Dimensions and options shared by the supernet and discrete models.
struct NetworkSpec {
  std::int64_t n_nodes = 0;
  std::int64_t n_features = 1;
  std::int64_t input_len = 12;
  /// Q for multi-step forecasting, 1 for single-step.
  std::int64_t output_len = 12;
  std::int64_t hidden = 32;
  std::int64_t micro_nodes = 5;  // M
  std::int64_t blocks = 4;       // B
  double partial_channel_fraction = 0.25;
  bool residual = true;
  OperatorHyper hyper;
};

/// Affine map over the last axis.
struct Dense {
  ag::Var weight;  // [in, out]
  ag::Var bias;    // [out]

  Dense() = default;
  Dense(std::int64_t in, std::int64_t out, Initializer& init)
      : weight(init.xavier(Shape{in, out}, in, out)), bias(init.zeros(Shape{out})) {}

  ag::Var forward(const ag::Var& x) const { return ag::linear(x, weight, bias); }
  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + "weight", weight});
    out.push_back({prefix + "bias", bias});
  }
};

/// A network mapping standardized windows [B, N, P, F] to standardized forecasts [B, N, output_len].
class ForecastModel {
 public:
  virtual ~ForecastModel() = default;

  virtual ag::Var forward(const Tensor& inputs, bool training) = 0;
  /// Network weights w (excludes architecture parameters).
  virtual ParamList weights() const = 0;
  virtual BufferList buffers() = 0;
  virtual const NetworkSpec& spec() const = 0;
};

/// Output head: ReLU, keep the last timestamp, then project D -> output_len per node.
ag::Var head_forward(const Dense& head, const ag::Var& features);

}  // namespace stnas
