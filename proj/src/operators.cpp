#include "stnas/operators.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "stnas/data.hpp"
#include "stnas/hash.hpp"

namespace stnas {

namespace {

constexpr std::array<OperatorKind, 6> kSearchable{OperatorKind::GDCC,  OperatorKind::INF_T, OperatorKind::DGCN,
                                                  OperatorKind::INF_S, OperatorKind::ZERO,  OperatorKind::IDENTITY};

struct KindName {
  OperatorKind kind;
  std::string_view name;
};

constexpr std::array<KindName, 9> kNames{{
    {OperatorKind::GDCC, "GDCC"},
    {OperatorKind::INF_T, "INF_T"},
    {OperatorKind::DGCN, "DGCN"},
    {OperatorKind::INF_S, "INF_S"},
    {OperatorKind::ZERO, "ZERO"},
    {OperatorKind::IDENTITY, "IDENTITY"},
    {OperatorKind::CHEBY_GCN, "CHEBY_GCN"},
    {OperatorKind::TRANSFORMER_T, "TRANSFORMER_T"},
    {OperatorKind::TRANSFORMER_S, "TRANSFORMER_S"},
}};

void require_rank4(const ag::Var& z, const char* op) {
  if (z.value().rank() != 4) {
    throw std::invalid_argument(std::string(op) + ": expected [B, N, T, D], got " + shape_str(z.shape()));
  }
}

// Attention along axis 2 of a [B, X, L, C] tensor, independently for every (b, x).
ag::Var attend_axis2(const AttentionWeights& w, const ag::Var& z, bool sparse) {
  const Shape shape = z.shape();
  const std::int64_t groups = shape[0] * shape[1], len = shape[2], ch = shape[3];
  ag::Var q = ag::reshape(ag::linear(z, w.wq), Shape{groups, len, ch});
  ag::Var k = ag::reshape(ag::linear(z, w.wk), Shape{groups, len, ch});
  ag::Var v = ag::reshape(ag::linear(z, w.wv), Shape{groups, len, ch});
  std::vector<std::uint8_t> mask;
  if (sparse) mask = select_sparse_queries(q.value(), k.value(), w.heads, w.sampling_factor, w.seed);
  return ag::reshape(ag::attention(q, k, v, w.heads, mask), shape);
}

ag::Var attend_temporal(const AttentionWeights& w, const ag::Var& z, bool sparse) {
  require_rank4(z, "temporal attention");
  return attend_axis2(w, z, sparse);
}

ag::Var attend_spatial(const AttentionWeights& w, const ag::Var& z, bool sparse) {
  require_rank4(z, "spatial attention");
  return ag::swap_axes12(attend_axis2(w, ag::swap_axes12(z), sparse));
}

}  // namespace

std::string_view to_string(OperatorKind kind) {
  for (const auto& kn : kNames) {
    if (kn.kind == kind) return kn.name;
  }
  return "UNKNOWN";
}

OperatorKind operator_from_string(std::string_view tag) {
  for (const auto& kn : kNames) {
    if (kn.name == tag) return kn.kind;
  }
  throw std::invalid_argument("unknown operator tag '" + std::string(tag) + "'");
}

const std::array<OperatorKind, 6>& searchable_operators() { return kSearchable; }

std::optional<std::size_t> searchable_index(OperatorKind kind) {
  for (std::size_t i = 0; i < kSearchable.size(); ++i) {
    if (kSearchable[i] == kind) return i;
  }
  return std::nullopt;
}

bool is_parametric(OperatorKind kind) { return kind != OperatorKind::ZERO && kind != OperatorKind::IDENTITY; }

GraphContext GraphContext::from_adjacency(const Tensor& adjacency, std::int64_t cheby_terms) {
  GraphContext g;
  g.supports = build_supports(adjacency);
  if (cheby_terms > 0) g.chebyshev = chebyshev_basis(scaled_laplacian(adjacency), cheby_terms);
  return g;
}

ag::Var zero_forward(const ag::Var& z) { return ag::Var(Tensor(z.shape()), false); }

ag::Var identity_forward(const ag::Var& z) { return z; }

ag::Var gdcc_forward(const GdccWeights& w, const ag::Var& z) {
  require_rank4(z, "gdcc");
  for (const auto* p : {&w.w_filter, &w.b_filter, &w.w_gate, &w.b_gate}) {
    if (!p->value().all_finite()) throw std::invalid_argument("gdcc: non-finite weights");
  }
  ag::Var filter = ag::causal_conv(z, w.w_filter, w.b_filter, w.dilation);
  ag::Var gate = ag::sigmoid(ag::causal_conv(z, w.w_gate, w.b_gate, w.dilation));
  return ag::mul(filter, gate);
}

ag::Var inf_t_forward(const AttentionWeights& w, const ag::Var& z) { return attend_temporal(w, z, true); }
ag::Var inf_s_forward(const AttentionWeights& w, const ag::Var& z) { return attend_spatial(w, z, true); }
ag::Var transformer_t_forward(const AttentionWeights& w, const ag::Var& z) { return attend_temporal(w, z, false); }
ag::Var transformer_s_forward(const AttentionWeights& w, const ag::Var& z) { return attend_spatial(w, z, false); }

ag::Var dgcn_forward(const DiffusionWeights& w, const ag::Var& z, const std::vector<Tensor>& supports) {
  require_rank4(z, "dgcn");
  if (supports.size() != 2) throw std::invalid_argument("dgcn: expected forward and backward supports");
  for (const auto& s : supports) {
    if (s.rank() != 2 || s.dim(0) != z.dim(1) || s.dim(1) != z.dim(1)) {
      throw std::invalid_argument("dgcn: support side " + shape_str(s.shape()) + " does not match N = " +
                                  std::to_string(z.dim(1)));
    }
  }
  if (w.forward_hops.empty() || w.forward_hops.size() != w.backward_hops.size()) {
    throw std::invalid_argument("dgcn: hop weight lists must be non-empty and equal length");
  }
  std::vector<ag::Var> terms;
  const std::array<const std::vector<ag::Var>*, 2> hops{&w.forward_hops, &w.backward_hops};
  for (std::size_t dir = 0; dir < 2; ++dir) {
    ag::Var x = z;
    for (std::size_t k = 0; k < hops[dir]->size(); ++k) {
      if (k > 0) x = ag::graph_conv(x, supports[dir]);
      terms.push_back(ag::linear(x, (*hops[dir])[k]));
    }
  }
  return ag::sum_n(terms);
}

ag::Var cheby_gcn_forward(const ChebyWeights& w, const ag::Var& z, const std::vector<Tensor>& chebyshev) {
  require_rank4(z, "cheby_gcn");
  if (w.terms.empty()) throw std::invalid_argument("cheby_gcn: need at least one term");
  if (chebyshev.size() < w.terms.size()) throw std::invalid_argument("cheby_gcn: not enough Chebyshev matrices");
  std::vector<ag::Var> terms;
  for (std::size_t k = 0; k < w.terms.size(); ++k) {
    ag::Var x = k == 0 ? z : ag::graph_conv(z, chebyshev[k]);
    terms.push_back(ag::linear(x, w.terms[k]));
  }
  return ag::sum_n(terms);
}

std::int64_t sparse_query_count(std::int64_t len, double factor) {
  if (len < 1) return 1;
  const auto u = static_cast<std::int64_t>(std::ceil(factor * std::log(static_cast<double>(len)) - 1e-12));
  return std::max<std::int64_t>(1, u);
}

std::vector<std::uint8_t> select_sparse_queries(const Tensor& q, const Tensor& k, std::int64_t heads, double factor,
                                                std::uint64_t seed) {
  const std::int64_t groups = q.dim(0), len = q.dim(1), ch = q.dim(2);
  const std::int64_t u = sparse_query_count(len, factor);
  if (u >= len) return {};
  const std::int64_t dh = ch / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(groups * heads * len), 0);
  std::vector<std::int64_t> keys(static_cast<std::size_t>(len));
  std::vector<double> score(static_cast<std::size_t>(len));
  std::vector<std::int64_t> order(static_cast<std::size_t>(len));
  for (std::int64_t g = 0; g < groups; ++g) {
    for (std::int64_t h = 0; h < heads; ++h) {
      std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(g * heads + h)));
      std::iota(keys.begin(), keys.end(), 0);
      for (std::int64_t i = 0; i < u; ++i) {
        std::uniform_int_distribution<std::int64_t> pick(i, len - 1);
        std::swap(keys[i], keys[pick(rng)]);
      }
      const std::int64_t base = g * len * ch + h * dh;
      for (std::int64_t i = 0; i < len; ++i) {
        double mx = -INFINITY, sum = 0.0;
        for (std::int64_t s = 0; s < u; ++s) {
          const std::int64_t j = keys[s];
          double dot = 0.0;
          for (std::int64_t e = 0; e < dh; ++e) dot += q[base + i * ch + e] * k[base + j * ch + e];
          dot *= scale;
          mx = std::max(mx, dot);
          sum += dot;
        }
        score[i] = mx - sum / static_cast<double>(u);
      }
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) { return score[a] > score[b]; });
      for (std::int64_t s = 0; s < u; ++s) mask[static_cast<std::size_t>((g * heads + h) * len + order[s])] = 1;
    }
  }
  return mask;
}

double power_iteration_lambda_max(const Tensor& sym) {
  const std::int64_t n = sym.dim(0);
  std::vector<double> v(static_cast<std::size_t>(n)), w(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i);
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  double lambda = 0.0;
  for (int iter = 0; iter < 100; ++iter) {
    for (std::int64_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < n; ++j) acc += sym[static_cast<std::size_t>(i * n + j)] * v[j];
      w[i] = acc;
    }
    double rayleigh = 0.0, wn = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      rayleigh += v[i] * w[i];
      wn += w[i] * w[i];
    }
    wn = std::sqrt(wn);
    if (wn < 1e-300) return 0.0;
    for (std::int64_t i = 0; i < n; ++i) v[i] = w[i] / wn;
    const bool done = iter > 0 && std::abs(rayleigh - lambda) < 1e-4;
    lambda = rayleigh;
    if (done) break;
  }
  return lambda;
}

Tensor scaled_laplacian(const Tensor& adjacency) {
  if (adjacency.rank() != 2 || adjacency.dim(0) != adjacency.dim(1)) {
    throw std::invalid_argument("scaled_laplacian: adjacency must be square");
  }
  const std::int64_t n = adjacency.dim(0);
  auto at = [n](const Tensor& t, std::int64_t i, std::int64_t j) { return t[static_cast<std::size_t>(i * n + j)]; };
  std::vector<double> inv_sqrt_deg(static_cast<std::size_t>(n), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::int64_t j = 0; j < n; ++j) deg += 0.5 * (at(adjacency, i, j) + at(adjacency, j, i));
    if (deg > 0.0) inv_sqrt_deg[i] = 1.0 / std::sqrt(deg);
  }
  Tensor lap(Shape{n, n});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      const double a = 0.5 * (at(adjacency, i, j) + at(adjacency, j, i));
      lap[static_cast<std::size_t>(i * n + j)] = (i == j ? 1.0 : 0.0) - inv_sqrt_deg[i] * a * inv_sqrt_deg[j];
    }
  double lambda = power_iteration_lambda_max(lap);
  if (!(lambda > 1e-12)) lambda = 2.0;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      double& x = lap[static_cast<std::size_t>(i * n + j)];
      x = 2.0 * x / lambda - (i == j ? 1.0 : 0.0);
    }
  return lap;
}

std::vector<Tensor> chebyshev_basis(const Tensor& scaled_lap, std::int64_t terms) {
  const std::int64_t n = scaled_lap.dim(0);
  std::vector<Tensor> out;
  Tensor eye(Shape{n, n});
  for (std::int64_t i = 0; i < n; ++i) eye[static_cast<std::size_t>(i * n + i)] = 1.0;
  if (terms >= 1) out.push_back(eye);
  if (terms >= 2) out.push_back(scaled_lap);
  for (std::int64_t k = 2; k < terms; ++k) {
    const Tensor& prev = out[static_cast<std::size_t>(k - 1)];
    const Tensor& prev2 = out[static_cast<std::size_t>(k - 2)];
    Tensor next(Shape{n, n});
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::int64_t m = 0; m < n; ++m)
          acc += scaled_lap[static_cast<std::size_t>(i * n + m)] * prev[static_cast<std::size_t>(m * n + j)];
        next[static_cast<std::size_t>(i * n + j)] = 2.0 * acc - prev2[static_cast<std::size_t>(i * n + j)];
      }
    out.push_back(std::move(next));
  }
  return out;
}

Operator::Operator(OperatorKind kind, std::int64_t channels, const OperatorHyper& hyper, Initializer& init)
    : kind_(kind), channels_(channels) {
  const std::int64_t c = channels;
  switch (kind) {
    case OperatorKind::GDCC: {
      if (hyper.kernel_size < 1 || hyper.dilation < 1) throw std::invalid_argument("gdcc: kernel and dilation >= 1");
      const std::int64_t k = hyper.kernel_size;
      gdcc_.w_filter = init.xavier(Shape{k, c, c}, k * c, c);
      gdcc_.b_filter = init.zeros(Shape{c});
      gdcc_.w_gate = init.xavier(Shape{k, c, c}, k * c, c);
      gdcc_.b_gate = init.zeros(Shape{c});
      gdcc_.dilation = hyper.dilation;
      break;
    }
    case OperatorKind::INF_T:
    case OperatorKind::INF_S:
    case OperatorKind::TRANSFORMER_T:
    case OperatorKind::TRANSFORMER_S:
      if (hyper.heads < 1 || c % hyper.heads != 0) throw std::invalid_argument("attention: heads must divide width");
      attention_.wq = init.xavier(Shape{c, c}, c, c);
      attention_.wk = init.xavier(Shape{c, c}, c, c);
      attention_.wv = init.xavier(Shape{c, c}, c, c);
      attention_.heads = hyper.heads;
      attention_.sampling_factor = hyper.sampling_factor;
      attention_.seed = init.next_seed();
      break;
    case OperatorKind::DGCN:
      if (hyper.diffusion_order < 0) throw std::invalid_argument("dgcn: diffusion order must be >= 0");
      for (std::int64_t k = 0; k <= hyper.diffusion_order; ++k) {
        diffusion_.forward_hops.push_back(init.xavier(Shape{c, c}, c, c));
        diffusion_.backward_hops.push_back(init.xavier(Shape{c, c}, c, c));
      }
      break;
    case OperatorKind::CHEBY_GCN:
      if (hyper.cheby_terms < 1) throw std::invalid_argument("cheby_gcn: need at least one term");
      for (std::int64_t k = 0; k < hyper.cheby_terms; ++k) cheby_.terms.push_back(init.xavier(Shape{c, c}, c, c));
      break;
    case OperatorKind::ZERO:
    case OperatorKind::IDENTITY:
      break;
  }
  if (is_parametric(kind)) norm_ = BatchNorm(c);
}

ag::Var Operator::core_forward(const ag::Var& z, const GraphContext& graph) const {
  switch (kind_) {
    case OperatorKind::ZERO:
      return zero_forward(z);
    case OperatorKind::IDENTITY:
      return identity_forward(z);
    case OperatorKind::GDCC:
      return gdcc_forward(gdcc_, z);
    case OperatorKind::INF_T:
      return inf_t_forward(attention_, z);
    case OperatorKind::INF_S:
      return inf_s_forward(attention_, z);
    case OperatorKind::TRANSFORMER_T:
      return transformer_t_forward(attention_, z);
    case OperatorKind::TRANSFORMER_S:
      return transformer_s_forward(attention_, z);
    case OperatorKind::DGCN:
      return dgcn_forward(diffusion_, z, graph.supports);
    case OperatorKind::CHEBY_GCN:
      return cheby_gcn_forward(cheby_, z, graph.chebyshev);
  }
  throw std::logic_error("unhandled operator kind");
}

ag::Var Operator::forward(const ag::Var& z, const GraphContext& graph, bool training) {
  if (!is_parametric(kind_)) return core_forward(z, graph);
  return norm_.forward(core_forward(ag::relu(z), graph), training);
}

void Operator::collect_params(const std::string& prefix, ParamList& out) const {
  switch (kind_) {
    case OperatorKind::GDCC:
      out.push_back({prefix + "w_filter", gdcc_.w_filter});
      out.push_back({prefix + "b_filter", gdcc_.b_filter});
      out.push_back({prefix + "w_gate", gdcc_.w_gate});
      out.push_back({prefix + "b_gate", gdcc_.b_gate});
      break;
    case OperatorKind::INF_T:
    case OperatorKind::INF_S:
    case OperatorKind::TRANSFORMER_T:
    case OperatorKind::TRANSFORMER_S:
      out.push_back({prefix + "wq", attention_.wq});
      out.push_back({prefix + "wk", attention_.wk});
      out.push_back({prefix + "wv", attention_.wv});
      break;
    case OperatorKind::DGCN:
      for (std::size_t k = 0; k < diffusion_.forward_hops.size(); ++k) {
        out.push_back({prefix + "w_fwd" + std::to_string(k), diffusion_.forward_hops[k]});
        out.push_back({prefix + "w_bwd" + std::to_string(k), diffusion_.backward_hops[k]});
      }
      break;
    case OperatorKind::CHEBY_GCN:
      for (std::size_t k = 0; k < cheby_.terms.size(); ++k) out.push_back({prefix + "w" + std::to_string(k), cheby_.terms[k]});
      break;
    case OperatorKind::ZERO:
    case OperatorKind::IDENTITY:
      break;
  }
}

void Operator::collect_buffers(const std::string& prefix, BufferList& out) {
  if (is_parametric(kind_)) norm_.collect_buffers(prefix + "bn.", out);
}

}  // namespace stnas
