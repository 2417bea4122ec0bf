#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "stnas/derivation.hpp"
#include "stnas/supernet.hpp"

using namespace stnas;
namespace t = stnas::testing;

namespace {

std::size_t op_index(OperatorKind k) { return *searchable_index(k); }

GraphContext graph4() {
  Tensor a(Shape{4, 4}, std::vector<double>{0, 1, 0, 0, 1, 0, 1, 0, 0, 1, 0, 1, 0, 0, 1, 0});
  return GraphContext::from_adjacency(a, 3);
}

}  // namespace

TEST_CASE("edge weight examples") {
  std::vector<double> beta3(3, 0.0), alpha6(6, 0.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t o = 0; o < 6; ++o) CHECK(edge_weight(alpha6, beta3, i, o) == doctest::Approx(1.0 / 18.0).epsilon(1e-12));

  std::vector<double> beta{0.0, std::log(3.0)};
  std::vector<double> alpha{10, 0, 0, 0, 0, 0};
  CHECK(softmax_values(beta)[1] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(edge_weight(alpha, beta, 1, 0) == doctest::Approx(0.75).epsilon(1e-3));
  CHECK_THROWS_AS(edge_weight(alpha, beta, 2, 0), std::out_of_range);
  CHECK_THROWS_AS(edge_weight(alpha, beta, 0, 6), std::out_of_range);
}

TEST_CASE("edge weights of a node sum to one") {
  std::mt19937_64 rng(1);
  for (int draw = 0; draw < 50; ++draw) {
    auto mv = t::random_micro(5, rng);
    for (std::int64_t j = 1; j < 5; ++j) {
      double s = 0.0;
      for (std::int64_t i = 0; i < j; ++i)
        for (std::size_t o = 0; o < 6; ++o)
          s += edge_weight(mv.alpha[micro_edge_index(i, j)], mv.beta[static_cast<std::size_t>(j - 1)],
                           static_cast<std::size_t>(i), o);
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("strongest operator is retained") {
  MicroValues mv;
  // softmax of log-weights recovers the weights <0.2, 0.3, 0.2, ...>; pad the rest low
  std::vector<double> a{std::log(0.2), std::log(0.3), std::log(0.2), std::log(0.1), std::log(0.1), std::log(0.1)};
  mv.alpha.push_back(a);
  mv.beta.push_back({0.0});
  auto block = derive_st_block(mv);
  REQUIRE(block.nodes.size() == 1);
  REQUIRE(block.nodes[0].size() == 1);
  CHECK(block.nodes[0][0].src == 0);
  CHECK(block.nodes[0][0].op == searchable_operators()[1]);
}

TEST_CASE("node 3 keeps its mandatory edge and the dominant input") {
  MicroValues mv;
  for (std::int64_t j = 1; j < 4; ++j) {
    for (std::int64_t i = 0; i < j; ++i) mv.alpha.push_back(std::vector<double>(6, 0.0));
    mv.beta.push_back(std::vector<double>(static_cast<std::size_t>(j), 0.0));
  }
  mv.beta[2] = {4.0, 0.0, 0.0};
  mv.alpha[micro_edge_index(0, 3)][op_index(OperatorKind::DGCN)] = 2.0;
  mv.alpha[micro_edge_index(1, 3)][op_index(OperatorKind::GDCC)] = 3.0;
  mv.alpha[micro_edge_index(2, 3)][op_index(OperatorKind::INF_T)] = 1.0;
  auto block = derive_st_block(mv);
  CHECK(block.nodes[2] == std::vector<GenotypeEdge>{{2, OperatorKind::INF_T}, {0, OperatorKind::DGCN}});
  CHECK(block == t::brute_force_block(mv));
}

TEST_CASE("ties go to the lower operator, then the lower source") {
  MicroValues mv;
  for (std::int64_t j = 1; j < 4; ++j) {
    for (std::int64_t i = 0; i < j; ++i) mv.alpha.push_back(std::vector<double>(6, 0.0));
    mv.beta.push_back(std::vector<double>(static_cast<std::size_t>(j), 0.0));
  }
  auto block = derive_st_block(mv);
  CHECK(block.nodes[0] == std::vector<GenotypeEdge>{{0, OperatorKind::GDCC}});
  CHECK(block.nodes[1] == std::vector<GenotypeEdge>{{1, OperatorKind::GDCC}, {0, OperatorKind::GDCC}});
  CHECK(block.nodes[2] == std::vector<GenotypeEdge>{{2, OperatorKind::GDCC}, {0, OperatorKind::GDCC}});
}

TEST_CASE("M = 2 gives a single edge") {
  MicroValues mv;
  mv.alpha.push_back({0, 0, 0, 0, 0, 1});
  mv.beta.push_back({0.3});
  auto block = derive_st_block(mv);
  CHECK(block.nodes == std::vector<std::vector<GenotypeEdge>>{{{0, OperatorKind::IDENTITY}}});
}

TEST_CASE("forbidding ZERO on the mandatory edge") {
  MicroValues mv;
  std::vector<double> a(6, 0.0);
  a[op_index(OperatorKind::ZERO)] = 5.0;
  a[op_index(OperatorKind::DGCN)] = 1.0;
  mv.alpha.push_back(a);
  mv.beta.push_back({0.0});
  CHECK(derive_st_block(mv).nodes[0][0].op == OperatorKind::ZERO);
  CHECK(derive_st_block(mv, {true}).nodes[0][0].op == OperatorKind::DGCN);
}

TEST_CASE("derivation matches the brute-force scorer") {
  std::mt19937_64 rng(2);
  for (int draw = 0; draw < 200; ++draw) {
    auto mv = t::random_micro(5, rng);
    CHECK(derive_st_block(mv) == t::brute_force_block(mv));
    auto g = t::random_macro(4, rng);
    CHECK(derive_backbone(g, 4) == t::brute_force_backbone(g, 4));
  }
}

TEST_CASE("derivation is invariant to a constant shift") {
  std::mt19937_64 rng(3);
  for (int draw = 0; draw < 20; ++draw) {
    auto mv = t::random_micro(4, rng);
    auto shifted = mv;
    for (auto& a : shifted.alpha)
      for (auto& x : a) x += 3.7;
    for (auto& b : shifted.beta)
      for (auto& x : b) x -= 1.25;
    CHECK(derive_st_block(mv) == derive_st_block(shifted));
  }
}

TEST_CASE("derived degree is min(j, 2)") {
  std::mt19937_64 rng(4);
  auto block = derive_st_block(t::random_micro(6, rng));
  for (std::size_t k = 0; k < block.nodes.size(); ++k) {
    const auto j = static_cast<std::int64_t>(k + 1);
    CHECK(static_cast<std::int64_t>(block.nodes[k].size()) == std::min<std::int64_t>(j, 2));
    CHECK(block.nodes[k][0].src == j - 1);
    for (const auto& e : block.nodes[k]) CHECK(e.src < j);
  }
}

TEST_CASE("backbone derivation") {
  CHECK(derive_backbone({}, 1) == std::vector<BackboneEdge>{{kEmbed, 1}});
  MacroValues chain{{0, 5}, {0, 0, 5}, {0, 0, 0, 5}};
  CHECK(derive_backbone(chain, 4) == chain_backbone(4));
  MacroValues ties{{1, 1}, {2, 2, 2}};
  CHECK(derive_backbone(ties, 3) == std::vector<BackboneEdge>{{kEmbed, 1}, {kEmbed, 2}, {kEmbed, 3}});
  CHECK_THROWS(derive_backbone({{0, 1}}, 3));
}

TEST_CASE("genotype JSON round trip and field errors") {
  auto g = random_genotype(5, 4, 32, 9);
  g.meta.dataset = "syn8";
  const auto text = genotype_to_json(g);
  auto back = genotype_from_json(text);
  CHECK(back == g);
  CHECK(genotype_hash(back) == genotype_hash(g));

  auto expect_field = [](const std::string& doc, const std::string& field) {
    try {
      genotype_from_json(doc);
      FAIL("expected a genotype error");
    } catch (const GenotypeError& e) {
      CAPTURE(e.what());
      CHECK(std::string(e.what()).find(field) != std::string::npos);
    }
  };
  std::string bad_op = text;
  bad_op.replace(bad_op.find("\"op\": \"") + 7, 1, "X");
  expect_field(bad_op, "blocks[0].nodes[0][0].op");
  expect_field(R"({"meta": {"M": 3, "B": 1, "D": 8, "opset": "autocts-v1", "dataset": "x"},
                   "blocks": [{"nodes": [[{"src": 0, "op": "GDCC"}], [{"src": 0, "op": "GDCC"}]]}],
                   "backbone": [{"src": "EMBED", "dst": 1}]})",
               "blocks[0].nodes[1]");
  expect_field(R"({"meta": {"M": 2, "B": 1, "D": 8, "opset": "autocts-v1", "dataset": "x"},
                   "blocks": [{"nodes": [[{"src": 0, "op": "GDCC"}]]}],
                   "backbone": [{"src": 2, "dst": 1}]})",
               "backbone");
  expect_field(R"({"meta": {"B": 1, "D": 8, "opset": "autocts-v1", "dataset": "x"}, "blocks": [], "backbone": []})",
               "meta.M");
}

TEST_CASE("reference operators need explicit permission") {
  auto g = uniform_genotype(2, 1, 4, OperatorKind::CHEBY_GCN);
  CHECK_THROWS_AS(g.validate(), GenotypeError);
  CHECK_NOTHROW(g.validate(true));
}

TEST_CASE("discrete models build from genotypes") {
  NetworkSpec spec;
  spec.n_nodes = 4;
  spec.input_len = 6;
  spec.output_len = 3;
  auto g = uniform_genotype(3, 2, 8, OperatorKind::IDENTITY);
  auto model = build_discrete_model(g, spec, graph4(), 1);
  std::mt19937_64 rng(5);
  Tensor x = t::random_tensor(Shape{2, 4, 6, 1}, rng);
  auto y = model->forward(x, false).value();
  CHECK(y.shape() == Shape{2, 4, 3});
  CHECK(y.all_finite());

  // every searchable operator at once
  Genotype mixed;
  mixed.meta = {3, 2, 8, kOpsetVersion, "x"};
  mixed.blocks = {BlockGenotype{{{{0, OperatorKind::GDCC}}, {{1, OperatorKind::INF_T}, {0, OperatorKind::DGCN}}}},
                  BlockGenotype{{{{0, OperatorKind::INF_S}}, {{1, OperatorKind::ZERO}, {0, OperatorKind::IDENTITY}}}}};
  mixed.backbone = {{kEmbed, 1}, {kEmbed, 2}};
  auto m3 = build_discrete_model(mixed, spec, graph4(), 2);
  CHECK(m3->forward(x, true).value().all_finite());

  auto again = build_discrete_model(genotype_from_json(genotype_to_json(mixed)), spec, graph4(), 2);
  CHECK(count_elements(again->weights()) == count_elements(m3->weights()));
  CHECK(checksum(again->weights()) == checksum(m3->weights()));
}

TEST_CASE("a large four-block genotype with every operator family parses and builds") {
  // 5 GDCC, 2 INF_T, 5 INF_S and 10 DGCN over four M = 5 blocks (28 edges, the rest IDENTITY)
  std::vector<OperatorKind> pool;
  for (int i = 0; i < 5; ++i) pool.push_back(OperatorKind::GDCC);
  for (int i = 0; i < 2; ++i) pool.push_back(OperatorKind::INF_T);
  for (int i = 0; i < 5; ++i) pool.push_back(OperatorKind::INF_S);
  for (int i = 0; i < 10; ++i) pool.push_back(OperatorKind::DGCN);
  while (pool.size() < 28) pool.push_back(OperatorKind::IDENTITY);
  Genotype g;
  g.meta = {5, 4, 8, kOpsetVersion, "pems"};
  std::size_t next = 0;
  for (int b = 0; b < 4; ++b) {
    BlockGenotype bg;
    for (std::int64_t j = 1; j < 5; ++j) {
      std::vector<GenotypeEdge> edges{{j - 1, pool[next++]}};
      if (j >= 2) edges.push_back({0, pool[next++]});
      bg.nodes.push_back(edges);
    }
    g.blocks.push_back(bg);
  }
  g.backbone = {{kEmbed, 1}, {1, 2}, {kEmbed, 3}, {2, 4}};
  auto parsed = genotype_from_json(genotype_to_json(g));
  NetworkSpec spec;
  spec.n_nodes = 4;
  auto model = build_discrete_model(parsed, spec, graph4(), 3);
  std::mt19937_64 rng(6);
  CHECK(model->forward(t::random_tensor(Shape{1, 4, 12, 1}, rng), false).value().all_finite());
}

TEST_CASE("supernet derivation follows its parameters") {
  NetworkSpec spec;
  spec.n_nodes = 4;
  spec.hidden = 4;
  spec.micro_nodes = 3;
  spec.blocks = 2;
  SuperNet net(spec, graph4(), 7);
  std::mt19937_64 rng(8);
  for (auto& p : net.arch_params()) {
    auto v = p.var;
    v.mutable_value() = t::random_tensor(v.shape(), rng);
  }
  auto g = derive_genotype(net, "toy");
  CHECK(g.meta.micro_nodes == 3);
  CHECK(g.meta.blocks == 2);
  for (std::size_t b = 0; b < 2; ++b) CHECK(g.blocks[b] == t::brute_force_block(micro_values(net, b)));
  CHECK(g.backbone == t::brute_force_backbone(macro_values(net), 2));
}
