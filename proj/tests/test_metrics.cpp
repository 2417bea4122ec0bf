#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "stnas/derivation.hpp"
#include "stnas/metrics.hpp"

using namespace stnas;

namespace {

/// Forecasts the stored targets exactly, ignoring its inputs.
class OracleModel : public ForecastModel {
 public:
  OracleModel(const WindowSet& w, const Scaler& s, NetworkSpec spec) : windows_(w), scaler_(s), spec_(spec) {}
  ag::Var forward(const Tensor& inputs, bool) override {
    // find the batch by matching inputs against the window set
    const std::int64_t b = inputs.dim(0), n = spec_.n_nodes, q = spec_.output_len;
    Tensor out(Shape{b, n, q});
    const std::size_t per = inputs.size() / static_cast<std::size_t>(b);
    for (std::int64_t i = 0; i < b; ++i) {
      std::int64_t match = -1;
      for (std::int64_t s = 0; s < windows_.count() && match < 0; ++s) {
        bool eq = true;
        for (std::size_t k = 0; k < per && eq; ++k)
          eq = inputs[static_cast<std::size_t>(i) * per + k] == windows_.inputs[static_cast<std::size_t>(s) * per + k];
        if (eq) match = s;
      }
      for (std::int64_t node = 0; node < n; ++node)
        for (std::int64_t k = 0; k < q; ++k)
          out.at({i, node, k}) = scaler_.transform(windows_.targets.at({match, node, k, 0}), 0);
    }
    return ag::Var(out);
  }
  ParamList weights() const override { return {}; }
  BufferList buffers() override { return {}; }
  const NetworkSpec& spec() const override { return spec_; }

 private:
  const WindowSet& windows_;
  const Scaler& scaler_;
  NetworkSpec spec_;
};

}  // namespace

TEST_CASE("hand-computed metrics") {
  const std::vector<double> p{1, 2}, y{2, 4};
  CHECK(mae(p, y) == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(rmse(p, y) == doctest::Approx(std::sqrt(2.5)).epsilon(1e-12));
  CHECK(std::abs(rmse(p, y) - 1.58114) < 1e-5);
  CHECK(mape(p, y) == doctest::Approx(50.0).epsilon(1e-12));

  const std::vector<double> p4{1, 2, 3, 4}, y4{2, 2, 0, 8};
  CHECK(mae(p4, y4) == doctest::Approx((1.0 + 0 + 3 + 4) / 4.0).epsilon(1e-12));
  CHECK(rmse(p4, y4) == doctest::Approx(std::sqrt((1.0 + 0 + 9 + 16) / 4.0)).epsilon(1e-12));
  // the zero truth is dropped from MAPE only
  CHECK(mape(p4, y4) == doctest::Approx(100.0 * (0.5 + 0.0 + 0.5) / 3.0).epsilon(1e-12));
  auto mask = nonzero_mask(y4);
  CHECK(mae(p4, y4, mask) == doctest::Approx((1.0 + 0 + 4) / 3.0).epsilon(1e-12));

  const std::vector<double> zeros{0, 0, 0, 0};
  CHECK_THROWS_WITH_AS(mape(p4, zeros), doctest::Contains("no valid entries"), MetricError);
  const std::vector<std::uint8_t> none(4, 0);
  CHECK_THROWS_WITH_AS(mae(p4, y4, none), doctest::Contains("no valid entries"), MetricError);
}

TEST_CASE("rrse") {
  const std::vector<double> y{1, -1, 3, 5};
  CHECK(rrse(y, y) == 0.0);
  const std::vector<double> mean(4, 2.0);
  CHECK(rrse(mean, y) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rrse(std::vector<double>{0, 0}, std::vector<double>{1, -1}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(rrse(y, std::vector<double>(4, 3.0)), MetricError);
}

TEST_CASE("corr") {
  // 4 windows, 1 node
  const std::vector<double> y{1, 3, 2, 7};
  std::vector<double> neg(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) neg[i] = -y[i];
  CHECK(corr(y, y, 1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(corr(neg, y, 1) == doctest::Approx(-1.0).epsilon(1e-12));

  // 2 nodes; node 1 has constant truth and is skipped
  const std::vector<double> y2{1, 5, 3, 5, 2, 5, 7, 5};
  const std::vector<double> p2{2, 0, 4, 1, 3, 9, 8, 2};
  CHECK(corr(p2, y2, 2) == doctest::Approx(corr(std::vector<double>{2, 4, 3, 8}, std::vector<double>{1, 3, 2, 7}, 1)));
  CHECK_THROWS_AS(corr(std::vector<double>{1, 2}, std::vector<double>{5, 5}, 1), MetricError);
  CHECK_THROWS_AS(corr(std::vector<double>{1}, std::vector<double>{5}, 1), MetricError);

  std::mt19937_64 rng(42);
  std::normal_distribution<double> nd;
  std::vector<double> a(10000), b(10000);
  for (auto& x : a) x = nd(rng);
  for (auto& x : b) x = nd(rng);
  CHECK(std::abs(corr(a, b, 1)) < 0.05);
}

TEST_CASE("metric symmetry and scale covariance") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.5, 3.0);
  std::vector<double> p(50), y(50);
  for (auto& x : p) x = u(rng);
  for (auto& x : y) x = u(rng);
  CHECK(mae(p, y) == doctest::Approx(mae(y, p)));
  CHECK(rmse(p, y) == doctest::Approx(rmse(y, p)));
  CHECK(mae(p, y) <= rmse(p, y));
  std::vector<double> cp(p), cy(y);
  for (auto& x : cp) x *= -2.5;
  for (auto& x : cy) x *= -2.5;
  CHECK(mae(cp, cy) == doctest::Approx(2.5 * mae(p, y)));
  std::vector<double> sp(p), sy(y);
  for (auto& x : sp) x *= 7.0;
  for (auto& x : sy) x *= 7.0;
  CHECK(mape(sp, sy) == doctest::Approx(mape(p, y)));
}

TEST_CASE("evaluate reports horizons plus the average") {
  auto ds = generate_synthetic(4, 400, 3, SyntheticProcess::Diffusion);
  auto splits = split_and_window(ds, SplitSpec{}, 12, 12, ForecastMode::MultiStep);
  NetworkSpec spec;
  spec.n_nodes = 4;
  OracleModel oracle(splits.test, splits.scaler, spec);
  auto report = evaluate(oracle, splits.test, splits.scaler);
  REQUIRE(report.rows.size() == 4);
  CHECK(report.rows[0].horizon == 3);
  CHECK(report.rows[1].horizon == 6);
  CHECK(report.rows[2].horizon == 12);
  CHECK(report.average().horizon == 0);
  for (const auto& r : report.rows) {
    CHECK(r.mae < 1e-9);
    CHECK(r.rmse < 1e-9);
    CHECK(r.mape < 1e-7);
  }
  CHECK(report.consistent());
  CHECK(report.n_windows == splits.test.count());

  EvalOptions bad;
  bad.horizons = {13};
  CHECK_THROWS_AS(evaluate(oracle, splits.test, splits.scaler, bad), MetricError);
}

TEST_CASE("report serialization and repeatability") {
  auto ds = generate_synthetic(4, 400, 3, SyntheticProcess::Diffusion);
  auto splits = split_and_window(ds, SplitSpec{}, 12, 12, ForecastMode::MultiStep);
  NetworkSpec spec;
  spec.n_nodes = 4;
  auto g = uniform_genotype(3, 1, 8, OperatorKind::GDCC);
  auto model = build_discrete_model(g, spec, GraphContext::from_adjacency(*ds.adjacency, 3), 5);
  auto a = evaluate(*model, splits.test, splits.scaler);
  auto b = evaluate(*model, splits.test, splits.scaler);
  CHECK(a.to_json() == b.to_json());
  CHECK(a.consistent());
  auto back = metrics_report_from_json(a.to_json());
  CHECK(back.to_json() == a.to_json());
  CHECK(a.to_table().find("average") != std::string::npos);
}

TEST_CASE("single step reports include rrse and corr") {
  auto ds = generate_synthetic(4, 300, 3, SyntheticProcess::Diffusion);
  auto splits = split_and_window(ds, SplitSpec{}, 24, 3, ForecastMode::SingleStep);
  NetworkSpec spec;
  spec.n_nodes = 4;
  spec.input_len = 24;
  spec.output_len = 1;
  OracleModel oracle(splits.test, splits.scaler, spec);
  EvalOptions opts;
  opts.horizons = {};
  auto report = evaluate(oracle, splits.test, splits.scaler, opts);
  REQUIRE(report.rrse.has_value());
  REQUIRE(report.corr.has_value());
  CHECK(*report.rrse < 1e-9);
  CHECK(*report.corr == doctest::Approx(1.0).epsilon(1e-9));
}
