#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "stnas/data.hpp"

using namespace stnas;
namespace fs = std::filesystem;

namespace {

CtsDataset ramp_dataset(std::int64_t n, std::int64_t t, std::int64_t f) {
  CtsDataset ds;
  ds.name = "ramp";
  ds.values = Tensor(Shape{n, t, f});
  for (std::int64_t node = 0; node < n; ++node)
    for (std::int64_t ti = 0; ti < t; ++ti)
      for (std::int64_t c = 0; c < f; ++c)
        ds.values.at({node, ti, c}) = 100.0 * static_cast<double>(node) + static_cast<double>(ti) + 0.25 * c;
  return ds;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("stnas_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("window count of a 60-step training split with P = Q = 12") {
  // 6:2:2 of T = 100 leaves val/test too short for P + Q = 24, so use T = 120 at 5:2.5:2.5
  SplitSpec spec;
  spec.ratios = {0.5, 0.25, 0.25};
  auto s = split_and_window(ramp_dataset(2, 120, 1), spec, 12, 12, ForecastMode::MultiStep);
  // 60 - 24 + 1
  CHECK(s.train.count() == 37);
  CHECK(s.train.inputs.shape() == Shape{37, 2, 12, 1});
  CHECK(s.train.targets.shape() == Shape{37, 2, 12, 1});
}

TEST_CASE("P = Q = 1 on a split of length 2 gives one window") {
  SplitSpec spec;
  spec.ratios = {0.2, 0.4, 0.4};
  auto s = split_and_window(ramp_dataset(2, 10, 1), spec, 1, 1, ForecastMode::MultiStep);
  CHECK(s.train.count() == 1);
}

TEST_CASE("single step targets hold the value Q steps after the input") {
  SplitSpec spec;
  spec.ratios = {0.6, 0.2, 0.2};
  auto ds = ramp_dataset(3, 200, 2);
  auto s = split_and_window(ds, spec, 12, 3, ForecastMode::SingleStep);
  CHECK(s.train.targets.shape() == Shape{s.train.count(), 3, 1, 1});
  for (std::int64_t w = 0; w < s.train.count(); ++w)
    for (std::int64_t node = 0; node < 3; ++node)
      CHECK(s.train.targets.at({w, node, 0, 0}) == ds.values.at({node, w + 12 + 3 - 1, 0}));
}

TEST_CASE("windows index the right timestamps") {
  SplitSpec spec;
  spec.ratios = {0.6, 0.2, 0.2};
  auto ds = ramp_dataset(4, 50, 1);
  auto s = split_and_window(ds, spec, 4, 3, ForecastMode::MultiStep);
  for (const WindowSet* set : {&s.train, &s.val, &s.test}) {
    for (std::int64_t w = 0; w < set->count(); ++w) {
      const auto off = set->offsets[static_cast<std::size_t>(w)];
      for (std::int64_t node = 0; node < 4; ++node) {
        for (std::int64_t k = 0; k < 4; ++k) {
          const double raw = ds.values.at({node, off + k, 0});
          CHECK(s.scaler.inverse_transform(set->inputs.at({w, node, k, 0}), 0) == doctest::Approx(raw).epsilon(1e-12));
        }
        for (std::int64_t k = 0; k < 3; ++k) CHECK(set->targets.at({w, node, k, 0}) == ds.values.at({node, off + 4 + k, 0}));
      }
    }
  }
  CHECK(s.val.offsets.front() == 30);
  CHECK(s.test.offsets.front() == 40);
}

TEST_CASE("scaler is fit on the training split only") {
  SplitSpec spec;
  spec.ratios = {0.5, 0.25, 0.25};
  auto ds = ramp_dataset(1, 40, 1);
  auto s = split_and_window(ds, spec, 2, 2, ForecastMode::MultiStep);
  // train timestamps 0..19
  CHECK(s.scaler.mean[0] == doctest::Approx(9.5));
  CHECK(s.scaler.std[0] == doctest::Approx(std::sqrt((400.0 - 1.0) / 12.0)));
  for (double x : {-3.0, 0.0, 17.5, 1e4}) CHECK(s.scaler.inverse_transform(s.scaler.transform(x, 0), 0) == doctest::Approx(x));
}

TEST_CASE("split too short for a window is a data error") {
  SplitSpec spec;
  spec.ratios = {0.6, 0.2, 0.2};
  CHECK_THROWS_AS(split_and_window(ramp_dataset(2, 40, 1), spec, 12, 12, ForecastMode::MultiStep), DataError);
  CHECK_THROWS_AS(split_and_window(ramp_dataset(2, 100, 1), spec, 12, 12, ForecastMode::MultiStep), DataError);
}

TEST_CASE("pseudo split sizes") {
  SplitSpec spec;
  spec.ratios = {0.5, 0.25, 0.25};
  auto s = split_and_window(ramp_dataset(2, 120, 1), spec, 12, 12, ForecastMode::MultiStep);
  REQUIRE(s.train.count() == 37);
  auto [a, b] = pseudo_split(s.train, 0.5);
  CHECK(a.count() == 19);
  CHECK(b.count() == 18);
  CHECK(a.offsets.back() + 1 == b.offsets.front());

  auto two = s.train.slice(0, 2);
  auto [c, d] = pseudo_split(two, 0.5);
  CHECK(c.count() == 1);
  CHECK(d.count() == 1);
  CHECK_THROWS_AS(pseudo_split(s.train.slice(0, 1), 0.5), DataError);
  CHECK_THROWS(pseudo_split(s.train, 1.0));
}

TEST_CASE("supports of a directed edge") {
  Tensor a(Shape{2, 2}, std::vector<double>{0, 1, 0, 0});
  auto sup = build_supports(a);
  REQUIRE(sup.size() == 2);
  CHECK(sup[0].storage() == std::vector<double>{0, 1, 0, 0});
  CHECK(sup[1].storage() == std::vector<double>{0, 0, 1, 0});
}

TEST_CASE("supports of identity and isolated nodes") {
  Tensor eye(Shape{3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto sup = build_supports(eye);
  CHECK(sup[0].storage() == eye.storage());
  CHECK(sup[1].storage() == eye.storage());

  Tensor a(Shape{3, 3}, std::vector<double>{0, 2, 0, 3, 0, 0, 0, 0, 0});
  sup = build_supports(a);
  for (const auto& s : sup) {
    CHECK(s.all_finite());
    for (std::int64_t j = 0; j < 3; ++j) CHECK(s.at({2, j}) == 0.0);
    for (std::int64_t i = 0; i < 2; ++i) {
      double row = 0.0;
      for (std::int64_t j = 0; j < 3; ++j) row += s.at({i, j});
      CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  Tensor neg(Shape{2, 2}, std::vector<double>{0, -1, 0, 0});
  CHECK_THROWS_AS(build_supports(neg), DataError);
}

TEST_CASE("dataset round trip through disk") {
  auto ds = generate_synthetic(4, 80, 3, SyntheticProcess::Diffusion);
  const auto dir = temp_dir("roundtrip");
  write_dataset(ds, dir);
  auto back = load_dataset(dir);
  CHECK(back.values.shape() == Shape{4, 80, 1});
  REQUIRE(back.adjacency.has_value());
  const auto again = temp_dir("roundtrip2");
  write_dataset(back, again);
  auto read = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(read(dir / "values.bin") == read(again / "values.bin"));
  CHECK(read(dir / "adj.csv") == read(again / "adj.csv"));
  CHECK(load_dataset(again).values.storage() == back.values.storage());
  fs::remove_all(dir);
  fs::remove_all(again);
}

TEST_CASE("descriptor with 40 values loads as [4, 10, 1]") {
  const auto dir = temp_dir("small");
  CtsDataset ds = ramp_dataset(4, 10, 1);
  write_dataset(ds, dir);
  auto back = load_dataset(dir);
  CHECK(back.values.shape() == Shape{4, 10, 1});
  CHECK(back.values.storage() == ds.values.storage());
  CHECK_FALSE(back.adjacency.has_value());
  fs::remove_all(dir);
}

TEST_CASE("adjacency of the wrong size is rejected") {
  const auto dir = temp_dir("badadj");
  CtsDataset ds = ramp_dataset(4, 10, 1);
  write_dataset(ds, dir);
  {
    std::ofstream meta(dir / "meta.json");
    meta << R"({"name": "bad", "n_nodes": 4, "n_steps": 10, "n_features": 1, "has_adjacency": true, "dtype": "float32"})";
    std::ofstream adj(dir / "adj.csv");
    adj << "0,1,0\n1,0,1\n0,1,0\n";
  }
  try {
    load_dataset(dir);
    FAIL("expected an error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("adjacency shape mismatch") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("truncated payload and NaN values are rejected") {
  const auto dir = temp_dir("trunc");
  write_dataset(ramp_dataset(4, 10, 1), dir);
  fs::resize_file(dir / "values.bin", 39 * 4);
  CHECK_THROWS_AS(load_dataset(dir), DataError);
  fs::remove_all(dir);

  CtsDataset ds = ramp_dataset(2, 10, 1);
  ds.values[3] = std::nan("");
  CHECK_THROWS_AS(ds.validate(), DataError);
}

TEST_CASE("synthetic generator") {
  auto a = generate_synthetic(8, 2048, 7, SyntheticProcess::Diffusion);
  CHECK(a.values.shape() == Shape{8, 2048, 1});
  REQUIRE(a.adjacency.has_value());
  CHECK(a.adjacency->shape() == Shape{8, 8});
  auto b = generate_synthetic(8, 2048, 7, SyntheticProcess::Diffusion);
  CHECK(a.values.storage() == b.values.storage());
  CHECK(a.adjacency->storage() == b.adjacency->storage());
  auto c = generate_synthetic(8, 2048, 8, SyntheticProcess::Diffusion);
  CHECK(a.values.storage() != c.values.storage());
  auto s = generate_synthetic(4, 100, 7, SyntheticProcess::Seasonal);
  CHECK_FALSE(s.adjacency.has_value());
  CHECK_THROWS(generate_synthetic(8, 63, 7, SyntheticProcess::Diffusion));
  CHECK(dataset_hash(a) == dataset_hash(b));
  CHECK(dataset_hash(a) != dataset_hash(c));
}
