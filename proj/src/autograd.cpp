#include "stnas/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace stnas::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;

// Eigen's vectorized reductions peel elements by address alignment, so the same data can
// sum differently depending on where the allocator put it. Scalar loops keep runs repeatable.
double ordered_dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  if (b == nullptr) {
    for (std::size_t i = 0; i < n; ++i) s += a[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  }
  return s;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

std::int64_t last_dim(const Tensor& t) { return t.shape().empty() ? 1 : t.shape().back(); }

}  // namespace

Tensor& Node::ensure_grad() {
  if (grad.shape() != value.shape()) grad = Tensor(value.shape());
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

void Var::zero_grad() {
  if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
}

Var make_var(Tensor value, const std::vector<Var>& parents, std::function<void(Node&)> backward) {
  Var out(std::move(value), false);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any) {
    out.node_->requires_grad = true;
    out.node_->parents.reserve(parents.size());
    for (const auto& p : parents) out.node_->parents.push_back(p.node());
    out.node_->backward_fn = std::move(backward);
  }
  return out;
}

void backward(const Var& output) {
  if (!output.defined() || output.value().size() != 1) {
    throw std::invalid_argument("backward: output must be a single-element tensor");
  }
  if (!output.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{output.node().get(), 0}};
  visited.insert(output.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads are recomputed per call; leaves accumulate.
  for (Node* n : order) {
    if (n->backward_fn) n->ensure_grad().fill(0.0);
  }
  output.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  MapVec(out.data(), out.size()) += CMapVec(b.value().data(), b.value().size());
  return make_var(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t i = 0; i < 2; ++i) {
      Node& p = parent(self, i);
      if (p.requires_grad) MapVec(p.ensure_grad().data(), p.value.size()) += CMapVec(self.grad.data(), self.grad.size());
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  MapVec(out.data(), out.size()) -= CMapVec(b.value().data(), b.value().size());
  return make_var(std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) MapVec(pa.ensure_grad().data(), pa.value.size()) += CMapVec(self.grad.data(), self.grad.size());
    if (pb.requires_grad) MapVec(pb.ensure_grad().data(), pb.value.size()) -= CMapVec(self.grad.data(), self.grad.size());
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  MapVec(out.data(), out.size()).array() *= CMapVec(b.value().data(), b.value().size()).array();
  return make_var(std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    const std::size_t n = self.grad.size();
    CMapVec g(self.grad.data(), n);
    if (pa.requires_grad) MapVec(pa.ensure_grad().data(), n).array() += g.array() * CMapVec(pb.value.data(), n).array();
    if (pb.requires_grad) MapVec(pb.ensure_grad().data(), n).array() += g.array() * CMapVec(pa.value.data(), n).array();
  });
}

Var scale(const Var& a, double s) { return affine(a, s, 0.0); }

Var affine(const Var& x, double s, double c) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = s * v + c;
  return make_var(std::move(out), {x}, [s](Node& self) {
    Node& p = parent(self, 0);
    MapVec(p.ensure_grad().data(), p.value.size()) += s * CMapVec(self.grad.data(), self.grad.size());
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  return make_var(std::move(out), {x}, [](Node& self) {
    Node& p = parent(self, 0);
    Tensor& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p.value[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
  return make_var(std::move(out), {x}, [](Node& self) {
    Node& p = parent(self, 0);
    Tensor& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = self.value[i];
      g[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

Var sum_n(const std::vector<Var>& xs) {
  const Var* first = nullptr;
  for (const auto& x : xs) {
    if (x.defined()) {
      first = &x;
      break;
    }
  }
  if (!first) throw std::invalid_argument("sum_n: no defined inputs");
  Tensor out(first->shape());
  std::vector<Var> parents;
  for (const auto& x : xs) {
    if (!x.defined()) continue;
    require_same_shape(*first, x, "sum_n");
    MapVec(out.data(), out.size()) += CMapVec(x.value().data(), x.value().size());
    parents.push_back(x);
  }
  return make_var(std::move(out), parents, [](Node& self) {
    CMapVec g(self.grad.data(), self.grad.size());
    for (auto& p : self.parents) {
      if (p->requires_grad) MapVec(p->ensure_grad().data(), p->value.size()) += g;
    }
  });
}

Var weighted_sum(const std::vector<Var>& xs, const Var& w) {
  if (w.value().rank() != 1 || w.value().size() != xs.size()) {
    throw std::invalid_argument("weighted_sum: weight vector length " + std::to_string(w.value().size()) +
                                " does not match " + std::to_string(xs.size()) + " inputs");
  }
  const Var* first = nullptr;
  for (const auto& x : xs) {
    if (x.defined()) {
      first = &x;
      break;
    }
  }
  if (!first) throw std::invalid_argument("weighted_sum: no defined inputs");
  Tensor out(first->shape());
  std::vector<Var> parents{w};
  std::vector<std::size_t> index;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!xs[i].defined()) continue;
    require_same_shape(*first, xs[i], "weighted_sum");
    MapVec(out.data(), out.size()) += w.value()[i] * CMapVec(xs[i].value().data(), xs[i].value().size());
    parents.push_back(xs[i]);
    index.push_back(i);
  }
  return make_var(std::move(out), parents, [index](Node& self) {
    Node& pw = parent(self, 0);
    CMapVec g(self.grad.data(), self.grad.size());
    for (std::size_t k = 0; k < index.size(); ++k) {
      Node& px = parent(self, k + 1);
      if (pw.requires_grad) pw.ensure_grad()[index[k]] += ordered_dot(self.grad.data(), px.value.data(), px.value.size());
      if (px.requires_grad) MapVec(px.ensure_grad().data(), px.value.size()) += pw.value[index[k]] * g;
    }
  });
}

Var softmax(const Var& v, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("softmax: temperature must be positive");
  if (v.value().rank() != 1) throw std::invalid_argument("softmax: expects a 1-D input");
  Tensor out = v.value();
  double mx = -INFINITY;
  for (double x : out.values()) mx = std::max(mx, x / tau);
  double z = 0.0;
  for (auto& x : out.values()) {
    x = std::exp(x / tau - mx);
    z += x;
  }
  for (auto& x : out.values()) x /= z;
  return make_var(std::move(out), {v}, [tau](Node& self) {
    Node& p = parent(self, 0);
    double dot = 0.0;
    for (std::size_t i = 0; i < self.value.size(); ++i) dot += self.grad[i] * self.value[i];
    Tensor& g = p.ensure_grad();
    for (std::size_t i = 0; i < self.value.size(); ++i) g[i] += self.value[i] * (self.grad[i] - dot) / tau;
  });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& x) {
  double s = ordered_dot(x.value().data(), nullptr, x.value().size());
  return make_var(Tensor::scalar(s), {x}, [](Node& self) {
    Node& p = parent(self, 0);
    MapVec(p.ensure_grad().data(), p.value.size()).array() += self.grad[0];
  });
}

Var mean_abs_error(const Var& pred, const Tensor& target) {
  if (pred.value().size() != target.size()) throw std::invalid_argument("mean_abs_error: size mismatch");
  const std::size_t n = target.size();
  if (n == 0) throw std::invalid_argument("mean_abs_error: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(pred.value()[i] - target[i]);
  return make_var(Tensor::scalar(s / static_cast<double>(n)), {pred}, [target, n](Node& self) {
    Node& p = parent(self, 0);
    Tensor& g = p.ensure_grad();
    const double k = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = p.value[i] - target[i];
      g[i] += d > 0.0 ? k : (d < 0.0 ? -k : 0.0);
    }
  });
}

Var mean_squared_error(const Var& pred, const Tensor& target) {
  if (pred.value().size() != target.size()) throw std::invalid_argument("mean_squared_error: size mismatch");
  const std::size_t n = target.size();
  if (n == 0) throw std::invalid_argument("mean_squared_error: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += (pred.value()[i] - target[i]) * (pred.value()[i] - target[i]);
  return make_var(Tensor::scalar(s / static_cast<double>(n)), {pred}, [target, n](Node& self) {
    Node& p = parent(self, 0);
    Tensor& g = p.ensure_grad();
    const double k = 2.0 * self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) g[i] += k * (p.value[i] - target[i]);
  });
}

Var dot_const(const Var& x, const Tensor& c) {
  if (x.value().size() != c.size()) throw std::invalid_argument("dot_const: size mismatch");
  double s = ordered_dot(x.value().data(), c.data(), c.size());
  return make_var(Tensor::scalar(s), {x}, [c](Node& self) {
    Node& p = parent(self, 0);
    MapVec(p.ensure_grad().data(), c.size()) += self.grad[0] * CMapVec(c.data(), c.size());
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_var(std::move(out), {x}, [](Node& self) {
    Node& p = parent(self, 0);
    MapVec(p.ensure_grad().data(), p.value.size()) += CMapVec(self.grad.data(), self.grad.size());
  });
}

Var slice_last(const Var& x, std::int64_t start, std::int64_t len) {
  const std::int64_t d = last_dim(x.value());
  if (start < 0 || len < 0 || start + len > d) throw std::out_of_range("slice_last: range out of bounds");
  Shape shape = x.shape();
  shape.back() = len;
  Tensor out(shape);
  const std::int64_t rows = static_cast<std::int64_t>(x.value().size()) / std::max<std::int64_t>(d, 1);
  for (std::int64_t r = 0; r < rows; ++r) {
    std::copy_n(x.value().data() + r * d + start, len, out.data() + r * len);
  }
  return make_var(std::move(out), {x}, [rows, d, start, len](Node& self) {
    Node& p = parent(self, 0);
    Tensor& g = p.ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t c = 0; c < len; ++c) g[r * d + start + c] += self.grad[r * len + c];
    }
  });
}

Var concat_last(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_last: no inputs");
  Shape base = xs.front().shape();
  std::int64_t total = 0;
  std::vector<std::int64_t> widths;
  for (const auto& x : xs) {
    Shape s = x.shape();
    if (s.size() != base.size() || !std::equal(s.begin(), s.end() - 1, base.begin())) {
      throw std::invalid_argument("concat_last: leading dimensions differ");
    }
    widths.push_back(s.back());
    total += s.back();
  }
  const std::int64_t rows = shape_numel(base) / std::max<std::int64_t>(base.back(), 1);
  base.back() = total;
  Tensor out(base);
  std::int64_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (std::int64_t r = 0; r < rows; ++r) {
      std::copy_n(xs[k].value().data() + r * widths[k], widths[k], out.data() + r * total + off);
    }
    off += widths[k];
  }
  return make_var(std::move(out), xs, [rows, total, widths](Node& self) {
    std::int64_t o = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      Node& p = parent(self, k);
      if (p.requires_grad) {
        Tensor& g = p.ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t c = 0; c < widths[k]; ++c) g[r * widths[k] + c] += self.grad[r * total + o + c];
        }
      }
      o += widths[k];
    }
  });
}

Var permute_last(const Var& x, const std::vector<std::int64_t>& perm) {
  const std::int64_t d = last_dim(x.value());
  if (static_cast<std::int64_t>(perm.size()) != d) throw std::invalid_argument("permute_last: permutation size");
  const std::int64_t rows = static_cast<std::int64_t>(x.value().size()) / std::max<std::int64_t>(d, 1);
  Tensor out(x.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < d; ++c) out[r * d + c] = x.value()[r * d + perm[c]];
  }
  return make_var(std::move(out), {x}, [rows, d, perm](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t c = 0; c < d; ++c) g[r * d + perm[c]] += self.grad[r * d + c];
    }
  });
}

Var swap_axes12(const Var& x) {
  if (x.value().rank() != 4) throw std::invalid_argument("swap_axes12: expects rank 4");
  const auto a = x.dim(0), b = x.dim(1), c = x.dim(2), d = x.dim(3);
  Tensor out(Shape{a, c, b, d});
  const double* src = x.value().data();
  for (std::int64_t i = 0; i < a; ++i)
    for (std::int64_t j = 0; j < b; ++j)
      for (std::int64_t k = 0; k < c; ++k)
        std::copy_n(src + ((i * b + j) * c + k) * d, d, out.data() + ((i * c + k) * b + j) * d);
  return make_var(std::move(out), {x}, [a, b, c, d](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    for (std::int64_t i = 0; i < a; ++i)
      for (std::int64_t j = 0; j < b; ++j)
        for (std::int64_t k = 0; k < c; ++k) {
          double* dst = g.data() + ((i * b + j) * c + k) * d;
          const double* s = self.grad.data() + ((i * c + k) * b + j) * d;
          for (std::int64_t e = 0; e < d; ++e) dst[e] += s[e];
        }
  });
}

Var select_axis2(const Var& x, std::int64_t c) {
  if (x.value().rank() != 4) throw std::invalid_argument("select_axis2: expects rank 4");
  const auto a = x.dim(0), b = x.dim(1), t = x.dim(2), d = x.dim(3);
  if (c < 0 || c >= t) throw std::out_of_range("select_axis2: index out of range");
  Tensor out(Shape{a, b, d});
  for (std::int64_t r = 0; r < a * b; ++r) std::copy_n(x.value().data() + (r * t + c) * d, d, out.data() + r * d);
  return make_var(std::move(out), {x}, [a, b, t, d, c](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    for (std::int64_t r = 0; r < a * b; ++r)
      for (std::int64_t e = 0; e < d; ++e) g[(r * t + c) * d + e] += self.grad[r * d + e];
  });
}

// ---------------------------------------------------------------------------
// Layers

Var linear(const Var& x, const Var& w, const Var& b) {
  if (w.value().rank() != 2) throw std::invalid_argument("linear: weight must be 2-D");
  const std::int64_t din = w.dim(0), dout = w.dim(1);
  if (last_dim(x.value()) != din) {
    throw std::invalid_argument("linear: input width " + std::to_string(last_dim(x.value())) + " vs weight " +
                                shape_str(w.shape()));
  }
  if (b.defined() && (b.value().rank() != 1 || b.dim(0) != dout)) throw std::invalid_argument("linear: bias shape");
  const std::int64_t rows = static_cast<std::int64_t>(x.value().size()) / din;
  Shape shape = x.shape();
  shape.back() = dout;
  Tensor out(shape);
  MapMat y(out.data(), rows, dout);
  y.noalias() = CMapMat(x.value().data(), rows, din) * CMapMat(w.value().data(), din, dout);
  if (b.defined()) y.rowwise() += CMapVec(b.value().data(), dout).transpose();
  std::vector<Var> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_var(std::move(out), parents, [rows, din, dout](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    CMapMat g(self.grad.data(), rows, dout);
    if (px.requires_grad) {
      MapMat(px.ensure_grad().data(), rows, din).noalias() += g * CMapMat(pw.value.data(), din, dout).transpose();
    }
    if (pw.requires_grad) {
      MapMat(pw.ensure_grad().data(), din, dout).noalias() += CMapMat(px.value.data(), rows, din).transpose() * g;
    }
    if (self.parents.size() > 2) {
      Node& pb = parent(self, 2);
      if (pb.requires_grad) MapVec(pb.ensure_grad().data(), dout) += g.colwise().sum().transpose();
    }
  });
}

namespace {

// rows of a [series, T, D] block shifted forward in time by s (zeros enter at the front).
void shift_time(const double* src, double* dst, std::int64_t series, std::int64_t t, std::int64_t d, std::int64_t s) {
  for (std::int64_t r = 0; r < series; ++r) {
    const double* in = src + r * t * d;
    double* out = dst + r * t * d;
    const std::int64_t keep = std::max<std::int64_t>(t - s, 0);
    std::fill_n(out, std::min(s, t) * d, 0.0);
    if (keep > 0) std::copy_n(in, keep * d, out + s * d);
  }
}

// Inverse of shift_time for gradients: dst[t - s] += src[t].
void unshift_time_add(const double* src, double* dst, std::int64_t series, std::int64_t t, std::int64_t d,
                      std::int64_t s) {
  for (std::int64_t r = 0; r < series; ++r) {
    const double* in = src + r * t * d;
    double* out = dst + r * t * d;
    for (std::int64_t k = s; k < t; ++k)
      for (std::int64_t e = 0; e < d; ++e) out[(k - s) * d + e] += in[k * d + e];
  }
}

}  // namespace

Var causal_conv(const Var& x, const Var& w, const Var& b, std::int64_t dilation) {
  if (x.value().rank() != 4) throw std::invalid_argument("causal_conv: input must be [B, N, T, D]");
  if (w.value().rank() != 3) throw std::invalid_argument("causal_conv: kernel must be [k, Din, Dout]");
  if (dilation < 1) throw std::invalid_argument("causal_conv: dilation must be >= 1");
  const std::int64_t taps = w.dim(0), din = w.dim(1), dout = w.dim(2);
  if (taps < 1) throw std::invalid_argument("causal_conv: kernel size must be >= 1");
  if (x.dim(3) != din) throw std::invalid_argument("causal_conv: channel mismatch");
  const std::int64_t series = x.dim(0) * x.dim(1), t = x.dim(2);
  const std::int64_t rows = series * t;
  Tensor out(Shape{x.dim(0), x.dim(1), t, dout});
  MapMat y(out.data(), rows, dout);
  Tensor shifted(Shape{rows, din});
  for (std::int64_t j = 0; j < taps; ++j) {
    const std::int64_t s = (taps - 1 - j) * dilation;
    const double* wj = w.value().data() + j * din * dout;
    if (s == 0) {
      y.noalias() += CMapMat(x.value().data(), rows, din) * CMapMat(wj, din, dout);
    } else {
      shift_time(x.value().data(), shifted.data(), series, t, din, s);
      y.noalias() += CMapMat(shifted.data(), rows, din) * CMapMat(wj, din, dout);
    }
  }
  if (b.defined()) y.rowwise() += CMapVec(b.value().data(), dout).transpose();
  std::vector<Var> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_var(std::move(out), parents, [=](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    CMapMat g(self.grad.data(), rows, dout);
    Tensor buf(Shape{rows, din});
    for (std::int64_t j = 0; j < taps; ++j) {
      const std::int64_t s = (taps - 1 - j) * dilation;
      const double* wj = pw.value.data() + j * din * dout;
      if (pw.requires_grad) {
        MapMat gw(pw.ensure_grad().data() + j * din * dout, din, dout);
        if (s == 0) {
          gw.noalias() += CMapMat(px.value.data(), rows, din).transpose() * g;
        } else {
          shift_time(px.value.data(), buf.data(), series, t, din, s);
          gw.noalias() += CMapMat(buf.data(), rows, din).transpose() * g;
        }
      }
      if (px.requires_grad) {
        if (s == 0) {
          MapMat(px.ensure_grad().data(), rows, din).noalias() += g * CMapMat(wj, din, dout).transpose();
        } else {
          MapMat(buf.data(), rows, din).noalias() = g * CMapMat(wj, din, dout).transpose();
          unshift_time_add(buf.data(), px.ensure_grad().data(), series, t, din, s);
        }
      }
    }
    if (self.parents.size() > 2) {
      Node& pb = parent(self, 2);
      if (pb.requires_grad) MapVec(pb.ensure_grad().data(), dout) += g.colwise().sum().transpose();
    }
  });
}

Var graph_conv(const Var& x, const Tensor& s) {
  if (x.value().rank() != 4) throw std::invalid_argument("graph_conv: input must be [B, N, T, D]");
  const std::int64_t batch = x.dim(0), n = x.dim(1), cols = x.dim(2) * x.dim(3);
  if (s.rank() != 2 || s.dim(0) != n || s.dim(1) != n) {
    throw std::invalid_argument("graph_conv: support " + shape_str(s.shape()) + " does not match " +
                                std::to_string(n) + " nodes");
  }
  Tensor out(x.shape());
  CMapMat sm(s.data(), n, n);
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    MapMat(out.data() + bi * n * cols, n, cols).noalias() = sm * CMapMat(x.value().data() + bi * n * cols, n, cols);
  }
  return make_var(std::move(out), {x}, [s, batch, n, cols](Node& self) {
    Node& p = parent(self, 0);
    CMapMat sm(s.data(), n, n);
    Tensor& g = p.ensure_grad();
    for (std::int64_t bi = 0; bi < batch; ++bi) {
      MapMat(g.data() + bi * n * cols, n, cols).noalias() +=
          sm.transpose() * CMapMat(self.grad.data() + bi * n * cols, n, cols);
    }
  });
}

Var batch_norm(const Var& x, Tensor& running_mean, Tensor& running_var, bool training, double momentum,
               double eps) {
  const std::int64_t d = last_dim(x.value());
  const std::int64_t rows = static_cast<std::int64_t>(x.value().size()) / d;
  if (static_cast<std::int64_t>(running_mean.size()) != d || static_cast<std::int64_t>(running_var.size()) != d) {
    throw std::invalid_argument("batch_norm: running statistics width mismatch");
  }
  CMapMat xm(x.value().data(), rows, d);
  Eigen::RowVectorXd mean(d), var(d);
  if (training) {
    mean = xm.colwise().mean();
    var = (xm.rowwise() - mean).array().square().colwise().mean();
    const double unbias = rows > 1 ? static_cast<double>(rows) / static_cast<double>(rows - 1) : 1.0;
    for (std::int64_t c = 0; c < d; ++c) {
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean[c];
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var[c] * unbias;
    }
  } else {
    for (std::int64_t c = 0; c < d; ++c) {
      mean[c] = running_mean[c];
      var[c] = running_var[c];
    }
  }
  Eigen::RowVectorXd inv_std = (var.array() + eps).rsqrt();
  Tensor out(x.shape());
  MapMat y(out.data(), rows, d);
  y = (xm.rowwise() - mean).array().rowwise() * inv_std.array();
  if (!training) {
    return make_var(std::move(out), {x}, [rows, d, inv_std](Node& self) {
      Node& p = parent(self, 0);
      MapMat(p.ensure_grad().data(), rows, d).array() +=
          CMapMat(self.grad.data(), rows, d).array().rowwise() * inv_std.array();
    });
  }
  return make_var(std::move(out), {x}, [rows, d, inv_std](Node& self) {
    Node& p = parent(self, 0);
    CMapMat g(self.grad.data(), rows, d);
    CMapMat yv(self.value.data(), rows, d);
    Eigen::RowVectorXd g_mean = g.colwise().mean();
    Eigen::RowVectorXd gy_mean = (g.array() * yv.array()).colwise().mean();
    MapMat gx(p.ensure_grad().data(), rows, d);
    gx.array() += ((g.rowwise() - g_mean).array() - yv.array().rowwise() * gy_mean.array()).rowwise() *
                  inv_std.array();
  });
}

Var attention(const Var& q, const Var& k, const Var& v, std::int64_t heads,
              const std::vector<std::uint8_t>& selected) {
  if (q.value().rank() != 3) throw std::invalid_argument("attention: expects [G, L, C]");
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const std::int64_t groups = q.dim(0), len = q.dim(1), ch = q.dim(2);
  if (heads < 1 || ch % heads != 0) throw std::invalid_argument("attention: channels not divisible by heads");
  const std::int64_t dh = ch / heads;
  if (!selected.empty() && static_cast<std::int64_t>(selected.size()) != groups * heads * len) {
    throw std::invalid_argument("attention: selection mask size mismatch");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs[g][h][i][j]; rows of unselected queries stay zero.
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(groups * heads * len * len), 0.0);
  Tensor out(q.shape());
  const double* qd = q.value().data();
  const double* kd = k.value().data();
  const double* vd = v.value().data();
  std::vector<double> vmean(dh);
  for (std::int64_t g = 0; g < groups; ++g) {
    for (std::int64_t h = 0; h < heads; ++h) {
      const std::int64_t base = g * len * ch + h * dh;
      std::fill(vmean.begin(), vmean.end(), 0.0);
      for (std::int64_t j = 0; j < len; ++j)
        for (std::int64_t e = 0; e < dh; ++e) vmean[e] += vd[base + j * ch + e];
      for (auto& m : vmean) m /= static_cast<double>(len);
      for (std::int64_t i = 0; i < len; ++i) {
        double* o = out.data() + base + i * ch;
        const bool sel = selected.empty() || selected[(g * heads + h) * len + i];
        if (!sel) {
          std::copy(vmean.begin(), vmean.end(), o);
          continue;
        }
        double* p = probs->data() + ((g * heads + h) * len + i) * len;
        double mx = -INFINITY;
        for (std::int64_t j = 0; j < len; ++j) {
          double s = 0.0;
          for (std::int64_t e = 0; e < dh; ++e) s += qd[base + i * ch + e] * kd[base + j * ch + e];
          p[j] = s * scale;
          mx = std::max(mx, p[j]);
        }
        double z = 0.0;
        for (std::int64_t j = 0; j < len; ++j) {
          p[j] = std::exp(p[j] - mx);
          z += p[j];
        }
        for (std::int64_t j = 0; j < len; ++j) {
          p[j] /= z;
          for (std::int64_t e = 0; e < dh; ++e) o[e] += p[j] * vd[base + j * ch + e];
        }
      }
    }
  }
  return make_var(std::move(out), {q, k, v}, [=](Node& self) {
    Node& pq = parent(self, 0);
    Node& pk = parent(self, 1);
    Node& pv = parent(self, 2);
    double* gq = pq.requires_grad ? pq.ensure_grad().data() : nullptr;
    double* gk = pk.requires_grad ? pk.ensure_grad().data() : nullptr;
    double* gv = pv.requires_grad ? pv.ensure_grad().data() : nullptr;
    const double* qv = pq.value.data();
    const double* kv = pk.value.data();
    const double* vv = pv.value.data();
    const double* go = self.grad.data();
    std::vector<double> dp(len);
    for (std::int64_t g = 0; g < groups; ++g) {
      for (std::int64_t h = 0; h < heads; ++h) {
        const std::int64_t base = g * len * ch + h * dh;
        for (std::int64_t i = 0; i < len; ++i) {
          const double* goi = go + base + i * ch;
          const bool sel = selected.empty() || selected[(g * heads + h) * len + i];
          if (!sel) {
            if (gv) {
              for (std::int64_t j = 0; j < len; ++j)
                for (std::int64_t e = 0; e < dh; ++e) gv[base + j * ch + e] += goi[e] / static_cast<double>(len);
            }
            continue;
          }
          const double* p = probs->data() + ((g * heads + h) * len + i) * len;
          double pdp = 0.0;
          for (std::int64_t j = 0; j < len; ++j) {
            double s = 0.0;
            for (std::int64_t e = 0; e < dh; ++e) s += goi[e] * vv[base + j * ch + e];
            dp[j] = s;
            pdp += p[j] * s;
            if (gv) {
              for (std::int64_t e = 0; e < dh; ++e) gv[base + j * ch + e] += p[j] * goi[e];
            }
          }
          for (std::int64_t j = 0; j < len; ++j) {
            const double ds = p[j] * (dp[j] - pdp) * scale;
            if (gq) {
              for (std::int64_t e = 0; e < dh; ++e) gq[base + i * ch + e] += ds * kv[base + j * ch + e];
            }
            if (gk) {
              for (std::int64_t e = 0; e < dh; ++e) gk[base + j * ch + e] += ds * qv[base + i * ch + e];
            }
          }
        }
      }
    }
  });
}

}  // namespace stnas::ag
