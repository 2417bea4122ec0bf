#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "stnas/data.hpp"
#include "stnas/operators.hpp"

using namespace stnas;
using stnas::testing::grad_check;
using stnas::testing::random_tensor;

namespace {

Tensor path_graph3() { return Tensor(Shape{3, 3}, std::vector<double>{0, 1, 0, 1, 0, 1, 0, 1, 0}); }

Tensor eye(std::int64_t n, double s = 1.0) {
  Tensor t(Shape{n, n});
  for (std::int64_t i = 0; i < n; ++i) t.at({i, i}) = s;
  return t;
}

AttentionWeights dense_attention(std::int64_t d, std::mt19937_64& rng) {
  AttentionWeights w;
  w.wq = ag::Var(random_tensor(Shape{d, d}, rng, 0.5));
  w.wk = ag::Var(random_tensor(Shape{d, d}, rng, 0.5));
  w.wv = ag::Var(random_tensor(Shape{d, d}, rng, 0.5));
  w.sampling_factor = 100.0;
  w.seed = 11;
  return w;
}

void check_close(const Tensor& a, const Tensor& b, double tol) {
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(tol).scale(1.0));
}

}  // namespace

TEST_CASE("operator tags round trip") {
  for (auto k : {OperatorKind::GDCC, OperatorKind::INF_T, OperatorKind::DGCN, OperatorKind::INF_S, OperatorKind::ZERO,
                 OperatorKind::IDENTITY, OperatorKind::CHEBY_GCN, OperatorKind::TRANSFORMER_T,
                 OperatorKind::TRANSFORMER_S}) {
    CHECK(operator_from_string(to_string(k)) == k);
  }
  CHECK_THROWS_AS(operator_from_string("LSTM"), std::invalid_argument);
  CHECK(searchable_operators().size() == 6);
  CHECK_FALSE(searchable_index(OperatorKind::CHEBY_GCN).has_value());
}

TEST_CASE("zero and identity") {
  std::mt19937_64 rng(1);
  ag::Var z(random_tensor(Shape{2, 4, 12, 8}, rng), true);
  auto h = zero_forward(z);
  CHECK(h.shape() == z.shape());
  for (double x : h.value().values()) CHECK(x == 0.0);
  CHECK(identity_forward(identity_forward(z)).value().storage() == z.value().storage());
  ag::backward(ag::sum(ag::add(ag::scale(identity_forward(z), 3.0), zero_forward(z))));
  for (double g : z.grad().values()) CHECK(g == 3.0);
}

TEST_CASE("every operator preserves shape") {
  std::mt19937_64 rng(2);
  Initializer init(3);
  auto graph = GraphContext::from_adjacency(path_graph3(), 3);
  ag::Var z(random_tensor(Shape{2, 3, 7, 4}, rng));
  for (auto k : {OperatorKind::GDCC, OperatorKind::INF_T, OperatorKind::DGCN, OperatorKind::INF_S, OperatorKind::ZERO,
                 OperatorKind::IDENTITY, OperatorKind::CHEBY_GCN, OperatorKind::TRANSFORMER_T,
                 OperatorKind::TRANSFORMER_S}) {
    Operator op(k, 4, OperatorHyper{}, init);
    CHECK(op.forward(z, graph, true).shape() == z.shape());
    CHECK(op.forward(z, graph, false).value().all_finite());
  }
}

TEST_CASE("gdcc on a constant input, kernel 1") {
  const double c = 0.7, w1 = 1.3, w2 = -0.4;
  GdccWeights w;
  w.w_filter = ag::Var(Tensor(Shape{1, 1, 1}, std::vector<double>{w1}));
  w.b_filter = ag::Var(Tensor(Shape{1}));
  w.w_gate = ag::Var(Tensor(Shape{1, 1, 1}, std::vector<double>{w2}));
  w.b_gate = ag::Var(Tensor(Shape{1}));
  auto h = gdcc_forward(w, ag::Var(Tensor(Shape{1, 1, 3, 1}, c)));
  const double expected = c * w1 / (1.0 + std::exp(-c * w2));
  for (double x : h.value().values()) CHECK(x == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("gdcc with a saturated gate is a causal convolution") {
  std::mt19937_64 rng(4);
  GdccWeights w;
  w.w_filter = ag::Var(random_tensor(Shape{2, 2, 2}, rng));
  w.b_filter = ag::Var(Tensor(Shape{2}));
  w.w_gate = ag::Var(Tensor(Shape{2, 2, 2}));
  w.b_gate = ag::Var(Tensor(Shape{2}, 50.0));
  Tensor z = random_tensor(Shape{1, 1, 5, 2}, rng);
  auto h = gdcc_forward(w, ag::Var(z)).value();
  const auto& k = w.w_filter.value();
  for (std::int64_t t = 0; t < 5; ++t) {
    for (std::int64_t o = 0; o < 2; ++o) {
      double acc = 0.0;
      // tap 1 sees x_t, tap 0 sees x_{t-1}
      for (std::int64_t i = 0; i < 2; ++i) {
        acc += z.at({0, 0, t, i}) * k.at({1, i, o});
        if (t >= 1) acc += z.at({0, 0, t - 1, i}) * k.at({0, i, o});
      }
      CHECK(h.at({0, 0, t, o}) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("gdcc is causal") {
  std::mt19937_64 rng(5);
  Initializer init(6);
  OperatorHyper hyper;
  hyper.kernel_size = 3;
  hyper.dilation = 2;
  Operator op(OperatorKind::GDCC, 4, hyper, init);
  auto graph = GraphContext::from_adjacency(path_graph3(), 3);
  Tensor z = random_tensor(Shape{1, 3, 10, 4}, rng);
  auto base = op.core_forward(ag::Var(z), graph).value();
  for (std::int64_t t = 0; t < 10; ++t) {
    Tensor zp = z;
    zp.at({0, 1, t, 2}) += 1.0;
    auto pert = op.core_forward(ag::Var(zp), graph).value();
    for (std::int64_t n = 0; n < 3; ++n)
      for (std::int64_t s = 0; s < t; ++s)
        for (std::int64_t c = 0; c < 4; ++c) CHECK(pert.at({0, n, s, c}) == base.at({0, n, s, c}));
  }
}

TEST_CASE("dgcn with identity graph and quarter weights returns its input") {
  std::mt19937_64 rng(7);
  DiffusionWeights w;
  for (int k = 0; k < 2; ++k) {
    w.forward_hops.push_back(ag::Var(eye(4, 0.25)));
    w.backward_hops.push_back(ag::Var(eye(4, 0.25)));
  }
  auto supports = build_supports(eye(3));
  Tensor z = random_tensor(Shape{2, 3, 5, 4}, rng);
  check_close(dgcn_forward(w, ag::Var(z), supports).value(), z, 1e-12);
}

TEST_CASE("dgcn with K = 0 ignores the graph") {
  std::mt19937_64 rng(8);
  DiffusionWeights w;
  w.forward_hops.push_back(ag::Var(random_tensor(Shape{4, 4}, rng)));
  w.backward_hops.push_back(ag::Var(random_tensor(Shape{4, 4}, rng)));
  Tensor z = random_tensor(Shape{1, 3, 4, 4}, rng);
  auto a = dgcn_forward(w, ag::Var(z), build_supports(path_graph3())).value();
  auto b = dgcn_forward(w, ag::Var(z), build_supports(eye(3))).value();
  check_close(a, b, 1e-12);
  CHECK_THROWS(dgcn_forward(w, ag::Var(z), build_supports(eye(4))));
}

TEST_CASE("dgcn leaves an isolated node to itself") {
  std::mt19937_64 rng(9);
  Initializer init(10);
  Tensor adj(Shape{3, 3}, std::vector<double>{0, 1, 0, 1, 0, 0, 0, 0, 0});
  auto graph = GraphContext::from_adjacency(adj, 3);
  Operator op(OperatorKind::DGCN, 4, OperatorHyper{}, init);
  Tensor z = random_tensor(Shape{1, 3, 4, 4}, rng);
  auto base = op.core_forward(ag::Var(z), graph).value();
  Tensor zp = z;
  for (std::int64_t t = 0; t < 4; ++t) zp.at({0, 0, t, 1}) += 2.0;
  auto pert = op.core_forward(ag::Var(zp), graph).value();
  for (std::int64_t t = 0; t < 4; ++t)
    for (std::int64_t c = 0; c < 4; ++c) CHECK(pert.at({0, 2, t, c}) == base.at({0, 2, t, c}));
}

TEST_CASE("sparse query count") {
  CHECK(sparse_query_count(1, 1.0) == 1);
  CHECK(sparse_query_count(12, 1.0) == 3);
  CHECK(sparse_query_count(6, 1.0) == 2);
  // more queries than positions keeps them all
  CHECK(sparse_query_count(4, 100.0) >= 4);
}

TEST_CASE("informer with full sampling equals dense attention") {
  std::mt19937_64 rng(12);
  auto w = dense_attention(4, rng);
  Tensor z = random_tensor(Shape{1, 2, 4, 4}, rng);
  check_close(inf_t_forward(w, ag::Var(z)).value(), transformer_t_forward(w, ag::Var(z)).value(), 1e-12);
  Tensor zs = random_tensor(Shape{1, 4, 2, 4}, rng);
  check_close(inf_s_forward(w, ag::Var(zs)).value(), transformer_s_forward(w, ag::Var(zs)).value(), 1e-12);
}

TEST_CASE("single position attention returns the value projection") {
  std::mt19937_64 rng(13);
  auto w = dense_attention(3, rng);
  w.sampling_factor = 1.0;
  Tensor z = random_tensor(Shape{1, 2, 1, 3}, rng);
  auto v = ag::linear(ag::Var(z), w.wv).value();
  check_close(inf_t_forward(w, ag::Var(z)).value(), v, 1e-12);
  Tensor zs = random_tensor(Shape{1, 1, 3, 3}, rng);
  check_close(inf_s_forward(w, ag::Var(zs)).value(), ag::linear(ag::Var(zs), w.wv).value(), 1e-12);
}

TEST_CASE("identical values give that value everywhere") {
  std::mt19937_64 rng(14);
  auto w = dense_attention(3, rng);
  w.sampling_factor = 1.0;
  Tensor z(Shape{1, 2, 9, 3});
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t t = 0; t < 9; ++t)
      for (std::int64_t c = 0; c < 3; ++c) z.at({0, n, t, c}) = 0.3 * c - 0.5 * n;
  auto v = ag::linear(ag::Var(z), w.wv).value();
  check_close(inf_t_forward(w, ag::Var(z)).value(), v, 1e-12);
}

TEST_CASE("dense attention with zero query/key weights averages the values") {
  std::mt19937_64 rng(15);
  auto w = dense_attention(3, rng);
  w.wq = ag::Var(Tensor(Shape{3, 3}));
  w.wk = ag::Var(Tensor(Shape{3, 3}));
  Tensor z = random_tensor(Shape{1, 2, 5, 3}, rng);
  auto v = ag::linear(ag::Var(z), w.wv).value();
  auto h = transformer_t_forward(w, ag::Var(z)).value();
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 3; ++c) {
      double mean = 0.0;
      for (std::int64_t t = 0; t < 5; ++t) mean += v.at({0, n, t, c}) / 5.0;
      for (std::int64_t t = 0; t < 5; ++t) CHECK(h.at({0, n, t, c}) == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("dense spatial attention is permutation equivariant") {
  std::mt19937_64 rng(16);
  auto w = dense_attention(4, rng);
  Tensor z = random_tensor(Shape{1, 4, 3, 4}, rng);
  const std::vector<std::int64_t> perm{2, 0, 3, 1};
  Tensor zp(z.shape());
  for (std::int64_t n = 0; n < 4; ++n)
    for (std::int64_t t = 0; t < 3; ++t)
      for (std::int64_t c = 0; c < 4; ++c) zp.at({0, n, t, c}) = z.at({0, perm[static_cast<std::size_t>(n)], t, c});
  auto h = inf_s_forward(w, ag::Var(z)).value();
  auto hp = inf_s_forward(w, ag::Var(zp)).value();
  for (std::int64_t n = 0; n < 4; ++n)
    for (std::int64_t t = 0; t < 3; ++t)
      for (std::int64_t c = 0; c < 4; ++c)
        CHECK(hp.at({0, n, t, c}) == doctest::Approx(h.at({0, perm[static_cast<std::size_t>(n)], t, c})).epsilon(1e-12));
}

TEST_CASE("sparse selection is deterministic and keeps u queries") {
  std::mt19937_64 rng(17);
  Tensor q = random_tensor(Shape{3, 20, 4}, rng);
  Tensor k = random_tensor(Shape{3, 20, 4}, rng);
  auto a = select_sparse_queries(q, k, 1, 1.0, 99);
  auto b = select_sparse_queries(q, k, 1, 1.0, 99);
  CHECK(a == b);
  REQUIRE(a.size() == 60);
  for (int g = 0; g < 3; ++g) {
    int kept = 0;
    for (int l = 0; l < 20; ++l) kept += a[static_cast<std::size_t>(g * 20 + l)];
    CHECK(kept == sparse_query_count(20, 1.0));
  }
}

TEST_CASE("chebyshev T_2 on a path graph") {
  auto lap = scaled_laplacian(path_graph3());
  auto basis = chebyshev_basis(lap, 3);
  REQUIRE(basis.size() == 3);
  // Normalized Laplacian of the 3-path has eigenvalues 0, 1, 2.
  Tensor l(Shape{3, 3});
  const double r = 1.0 / std::sqrt(2.0);
  const double nl[9] = {1, -r, 0, -r, 1, -r, 0, -r, 1};
  for (int i = 0; i < 9; ++i) l[static_cast<std::size_t>(i)] = nl[i];
  const double lmax = power_iteration_lambda_max(l);
  CHECK(lmax == doctest::Approx(2.0).epsilon(1e-3));
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t j = 0; j < 3; ++j) {
      const double lt = 2.0 * l.at({i, j}) / lmax - (i == j ? 1.0 : 0.0);
      CHECK(lap.at({i, j}) == doctest::Approx(lt).epsilon(1e-9));
    }
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t j = 0; j < 3; ++j) {
      double sq = 0.0;
      for (std::int64_t k = 0; k < 3; ++k) sq += lap.at({i, k}) * lap.at({k, j});
      CHECK(basis[2].at({i, j}) == doctest::Approx(2.0 * sq - (i == j ? 1.0 : 0.0)).epsilon(1e-12));
      CHECK(basis[0].at({i, j}) == (i == j ? 1.0 : 0.0));
    }
}

TEST_CASE("chebyshev with one term is a plain projection and isolated nodes stay finite") {
  std::mt19937_64 rng(18);
  ChebyWeights w;
  w.terms.push_back(ag::Var(random_tensor(Shape{4, 4}, rng)));
  Tensor z = random_tensor(Shape{1, 3, 2, 4}, rng);
  Tensor adj(Shape{3, 3}, std::vector<double>{0, 1, 0, 1, 0, 0, 0, 0, 0});
  auto g = GraphContext::from_adjacency(adj, 3);
  check_close(cheby_gcn_forward(w, ag::Var(z), g.chebyshev).value(), ag::linear(ag::Var(z), w.terms[0]).value(), 1e-12);
  for (const auto& t : g.chebyshev) CHECK(t.all_finite());
  Initializer init(19);
  Operator op(OperatorKind::CHEBY_GCN, 4, OperatorHyper{}, init);
  CHECK(op.forward(ag::Var(z), g, true).value().all_finite());
}

TEST_CASE("parametric operator gradients match finite differences") {
  auto graph = GraphContext::from_adjacency(Tensor(Shape{3, 3}, std::vector<double>{0, 0.8, 0.1, 0.5, 0, 1, 0.3, 0.2, 0}), 3);
  for (auto k : {OperatorKind::GDCC, OperatorKind::INF_T, OperatorKind::DGCN, OperatorKind::INF_S,
                 OperatorKind::CHEBY_GCN, OperatorKind::TRANSFORMER_T, OperatorKind::TRANSFORMER_S}) {
    CAPTURE(to_string(k));
    std::mt19937_64 rng(20);
    Initializer init(21);
    Operator op(k, 4, OperatorHyper{}, init);
    ag::Var z(random_tensor(Shape{1, 3, 6, 4}, rng), true);
    const Tensor r = random_tensor(Shape{1, 3, 6, 4}, rng);
    ParamList params;
    op.collect_params("", params);
    params.push_back({"input", z});
    auto res = grad_check(params, [&] { return ag::dot_const(op.forward(z, graph, true), r); });
    INFO(res.worst);
    CHECK(res.max_rel_error < 1e-4);
    CHECK(res.checked > 72);
  }
}
