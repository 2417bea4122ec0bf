#include "stnas/nn.hpp"

#include <cmath>
#include <cstring>

#include "stnas/hash.hpp"

namespace stnas {

ag::Var Initializer::xavier(Shape shape, std::int64_t fan_in, std::int64_t fan_out) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng_);
  return ag::Var(std::move(t), true);
}

ag::Var Initializer::normal(Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng_);
  return ag::Var(std::move(t), true);
}

ag::Var Initializer::zeros(Shape shape) { return ag::Var(Tensor(std::move(shape)), true); }

void set_requires_grad(const ParamList& params, bool on) {
  for (const auto& p : params) {
    ag::Var v = p.var;
    v.set_requires_grad(on);
  }
}

void zero_grads(const ParamList& params) {
  for (const auto& p : params) {
    ag::Var v = p.var;
    v.zero_grad();
  }
}

std::int64_t count_elements(const ParamList& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += static_cast<std::int64_t>(p.var.value().size());
  return n;
}

std::uint64_t checksum(const ParamList& params) {
  Fnv1a h;
  for (const auto& p : params) h.update(p.var.value().data(), p.var.value().size() * sizeof(double));
  return h.digest();
}

}  // namespace stnas
