#include "stnas/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace stnas {

Adam::Adam(ParamList params, AdamConfig config) : params_(std::move(params)), config_(config) {
  if (!(config_.lr > 0.0)) throw std::invalid_argument("Adam: learning rate must be positive");
  for (const auto& p : params_) {
    m_.emplace_back(p.var.shape());
    v_.emplace_back(p.var.shape());
  }
}

bool Adam::step() {
  for (const auto& p : params_) {
    if (!p.var.grad().empty() && !p.var.grad().all_finite()) return false;
  }
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    ag::Var var = params_[k].var;
    Tensor& w = var.mutable_value();
    const Tensor& g = var.grad();
    const bool has_grad = !g.empty();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = (has_grad ? g[i] : 0.0) + config_.weight_decay * w[i];
      m_[k][i] = config_.beta1 * m_[k][i] + (1.0 - config_.beta1) * gi;
      v_[k][i] = config_.beta2 * v_[k][i] + (1.0 - config_.beta2) * gi * gi;
      const double mhat = m_[k][i] / bc1;
      const double vhat = v_[k][i] / bc2;
      w[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
  return true;
}

void Adam::collect_state(const std::string& prefix, BufferList& out) {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    out.push_back({prefix + "m/" + params_[k].name, &m_[k]});
    out.push_back({prefix + "v/" + params_[k].name, &v_[k]});
  }
}

double clip_grad_norm(const ParamList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.var.grad().values()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (const auto& p : params) {
      ag::Var v = p.var;
      if (v.grad().empty()) continue;
      for (auto& g : v.mutable_grad().values()) g *= s;
    }
  }
  return norm;
}

}  // namespace stnas
